mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use emsd::{Mode, PredictorKind};

use settings::{EngineFlags, FileConfig, ModelShape, SweepSettings, DEFAULT_BENCH_BATCH_SIZES};

#[derive(Parser)]
#[command(name = "emsd", version, about = "Multi-sample speculative decoding harness")]
struct Cli {
    /// TOML file of key = value defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write deterministic target and draft checkpoints.
    MakeModel {
        /// Existing directory for target.bin and draft.bin.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Target init seed; the draft uses seed + 1.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_positions: Option<usize>,
    },
    /// Decode a corpus (one prompt per line) in one mode.
    Decode {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Results JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare greedy, vanilla and EMS decoding across batch sizes.
    Bench {
        #[command(flatten)]
        engine: EngineArgs,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',')]
        batch_size: Option<Vec<usize>>,
        /// Existing directory for bench.csv and bench.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo sweep of the batch padding model, as CSV.
    SimulatePadding {
        #[arg(long, value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        b_grid: Option<Vec<usize>>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EngineArgs {
    /// greedy, vanilla or ems.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// draft or retrieval.
    #[arg(long, value_parser = parse_predictor)]
    predictor: Option<PredictorKind>,
    /// Draft-model prediction length.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    match_len: Option<usize>,
    #[arg(long)]
    copy_len: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Keep decoding past end-of-sequence tokens until the budget is spent.
    #[arg(long)]
    ignore_eos: bool,
    /// Seed for in-memory models when no checkpoint is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    draft_model: Option<PathBuf>,
}

impl From<EngineArgs> for EngineFlags {
    fn from(a: EngineArgs) -> Self {
        Self {
            mode: a.mode,
            predictor: a.predictor,
            k: a.k,
            match_len: a.match_len,
            copy_len: a.copy_len,
            max_new_tokens: a.max_new_tokens,
            ignore_eos: a.ignore_eos,
            seed: a.seed,
            corpus: a.corpus,
            model: a.model,
            draft_model: a.draft_model,
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "greedy" => Ok(Mode::Greedy),
        "vanilla" => Ok(Mode::Vanilla),
        "ems" => Ok(Mode::Ems),
        _ => Err(format!("unknown mode `{s}` (expected greedy, vanilla or ems)")),
    }
}

fn parse_predictor(s: &str) -> Result<PredictorKind, String> {
    match s {
        "draft" => Ok(PredictorKind::Draft),
        "retrieval" => Ok(PredictorKind::Retrieval),
        _ => Err(format!("unknown predictor `{s}` (expected draft or retrieval)")),
    }
}

/// Reports a bad merged setting the way clap reports a bad flag.
fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::ValueValidation, msg).exit()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeModel { out, seed, max_positions } => {
            let out = out.or_else(|| file.out.clone()).unwrap_or_else(|| usage_error("--out is required"));
            let shape = ModelShape::resolve(&file, max_positions);
            commands::make_model(&out, shape, seed.or(file.seed).unwrap_or(0))
        }
        Command::Decode { engine, batch_size, out } => {
            let settings = EngineFlags::from(engine).resolve(&file)?;
            let b =
                batch_size.or_else(|| file.batch_size.clone().and_then(|v| v.into_vec().first().copied())).unwrap_or(1);
            if b == 0 {
                usage_error("--batch-size must be at least 1");
            }
            let shape = ModelShape::resolve(&file, None);
            commands::decode(&settings, shape, b, out.or_else(|| file.out.clone()).as_deref())
        }
        Command::Bench { engine, batch_size, out } => {
            let settings = EngineFlags::from(engine).resolve(&file)?;
            let sizes = batch_size
                .or_else(|| file.batch_size.clone().map(|v| v.into_vec()))
                .unwrap_or_else(|| DEFAULT_BENCH_BATCH_SIZES.to_vec());
            if sizes.is_empty() || sizes.contains(&0) {
                usage_error("--batch-size entries must be at least 1");
            }
            let out = out.or_else(|| file.out.clone()).unwrap_or_else(|| usage_error("--out is required"));
            let shape = ModelShape::resolve(&file, None);
            commands::bench(&settings, shape, &sizes, &out)
        }
        Command::SimulatePadding { p_grid, b_grid, cap, trials, seed, out } => {
            let sweep = SweepSettings::resolve(p_grid, b_grid, cap, trials, seed, &file);
            if sweep.trials == 0 {
                usage_error("--trials must be at least 1");
            }
            commands::simulate_padding(&sweep, out.or_else(|| file.out.clone()).as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
