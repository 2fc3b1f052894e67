use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use emsd::engine::{DecodeOutput, Timing};
use emsd::model::tokenizer::{encode_prompt, render};
use emsd::padding::{sweep, write_csv};
use emsd::{decode as run_decode, Mode, Model, ModelConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::{EngineSettings, ModelShape, SweepSettings};

pub fn make_model(out: &Path, shape: ModelShape, seed: u64) -> Result<()> {
    ensure!(out.is_dir(), "output directory {} does not exist", out.display());
    let (target_config, draft_config) = shape.configs(seed);
    for (name, config) in [("target.bin", target_config), ("draft.bin", draft_config)] {
        let model = Model::init(config)?;
        let path = out.join(name);
        model.save(&path)?;
        println!("{}  {}", model.checksum(), path.display());
    }
    Ok(())
}

struct Models {
    target: Model,
    draft: Model,
}

impl Models {
    fn load(settings: &EngineSettings, shape: ModelShape) -> Result<Self> {
        let target = match &settings.model {
            Some(path) => Model::load(path)?,
            None => Model::init(shape.configs(settings.seed).0)?,
        };
        let draft = match &settings.draft_model {
            Some(path) => Model::load(path)?,
            None => {
                let seed = target.config().init_seed.wrapping_add(1);
                Model::init(ModelConfig::draft(target.config(), seed))?
            }
        };
        Ok(Self { target, draft })
    }

    fn describe(&self) -> Value {
        json!({
            "target": { "config": self.target.config(), "checksum": self.target.checksum() },
            "draft": { "config": self.draft.config(), "checksum": self.draft.checksum() },
        })
    }
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    ensure!(!lines.is_empty(), "corpus {} has no prompts", path.display());
    Ok(lines)
}

/// Decodes the whole corpus in consecutive batches of `batch_size`.
fn run_corpus(
    settings: &EngineSettings,
    models: &Models,
    mode: Mode,
    batch_size: usize,
    prompts: &[Vec<u32>],
) -> Result<Vec<DecodeOutput>> {
    let config = settings.engine_config(mode, batch_size);
    prompts
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| {
            run_decode(&config, &models.target, Some(&models.draft), chunk)
                .with_context(|| format!("{mode:?} decode of batch {i}"))
        })
        .collect()
}

/// Deterministic totals over a corpus run.
#[derive(Debug, Clone, Serialize)]
struct Totals {
    tokens: usize,
    decode_steps: usize,
    avg_acceptance_length: f64,
    useful_writes: u64,
    input_padding: u64,
    kv_padding: u64,
    prefill_padding: u64,
    /// Decode-time PAD work: input padding plus KV padding.
    padded_work: u64,
    processed_tokens: u64,
    /// Mean per-step padding ratio from the cache ledger.
    r_bar_ledger: f64,
    /// Mean per-step padding ratio implied by the acceptance lengths.
    r_bar_records: f64,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn totals(runs: &[DecodeOutput]) -> Totals {
    let records = runs.iter().flat_map(|r| &r.records);
    let active: Vec<usize> = records.clone().flat_map(|r| &r.samples).filter(|s| s.active).map(|s| s.tau).collect();
    let tokens: usize = runs.iter().flat_map(|r| &r.outputs).map(Vec::len).sum();
    let steps: Vec<f64> =
        runs.iter().filter_map(|r| r.ledger.as_ref()).flat_map(|l| l.steps.iter().map(|s| s.padding_ratio())).collect();
    let n_records = records.clone().count();
    let input_padding: u64 = runs.iter().map(|r| r.metrics.input_padding).sum();
    let kv_padding: u64 = runs.iter().map(|r| r.metrics.kv_padding).sum();
    Totals {
        tokens,
        decode_steps: runs.iter().map(|r| r.metrics.decode_steps).sum(),
        avg_acceptance_length: if n_records == 0 {
            if tokens > 0 {
                1.0
            } else {
                0.0
            }
        } else {
            mean(active.iter().sum::<usize>() as f64, active.len())
        },
        useful_writes: runs.iter().map(|r| r.metrics.useful_writes).sum(),
        input_padding,
        kv_padding,
        prefill_padding: runs.iter().map(|r| r.prefill_padding).sum(),
        padded_work: input_padding + kv_padding,
        processed_tokens: runs.iter().map(|r| r.metrics.processed_tokens).sum(),
        r_bar_ledger: mean(steps.iter().sum(), steps.len()),
        r_bar_records: mean(records.map(|r| r.r_bar).sum(), n_records),
    }
}

fn timing(runs: &[DecodeOutput]) -> Timing {
    let tokens: usize = runs.iter().flat_map(|r| &r.outputs).map(Vec::len).sum();
    let prefill = runs.iter().map(|r| r.metrics.timing.prefill_secs).sum();
    let decode = runs.iter().map(|r| r.metrics.timing.decode_secs).sum();
    Timing::new(prefill, decode, tokens)
}

/// Internal cross-checks whose failure makes the command exit nonzero.
///
/// Step records derive r_bar from the acceptance lengths alone. Vanilla
/// commits exactly that share of PAD slots, so its ledger must agree; EMS
/// must commit none.
fn check_consistency(t: &Totals, mode: Mode) -> Result<()> {
    match mode {
        Mode::Greedy => {}
        Mode::Vanilla => ensure!(
            (t.r_bar_ledger - t.r_bar_records).abs() < 1e-9,
            "ledger padding ratio {} disagrees with step records {}",
            t.r_bar_ledger,
            t.r_bar_records
        ),
        Mode::Ems => {
            ensure!(t.padded_work == 0 && t.r_bar_ledger == 0.0, "EMS run recorded {} padded slots", t.padded_work)
        }
    }
    Ok(())
}

fn write_json(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn decode(settings: &EngineSettings, shape: ModelShape, batch_size: usize, out: Option<&Path>) -> Result<()> {
    let models = Models::load(settings, shape)?;
    let lines = read_corpus(&settings.corpus)?;
    let prompts: Vec<Vec<u32>> = lines.iter().map(|l| encode_prompt(l.as_bytes())).collect();
    let runs = run_corpus(settings, &models, settings.mode, batch_size, &prompts)?;
    let summary = totals(&runs);
    check_consistency(&summary, settings.mode)?;

    let outputs: Vec<Value> = lines
        .iter()
        .zip(runs.iter().flat_map(|r| &r.outputs))
        .map(|(prompt, tokens)| json!({ "prompt": prompt, "text": render(tokens), "tokens": tokens }))
        .collect();
    let mut wall = Vec::new();
    let batches: Vec<Value> = runs
        .iter()
        .map(|r| {
            let mut metrics = serde_json::to_value(&r.metrics).expect("metrics serialize");
            if let Some(t) = metrics.as_object_mut().and_then(|m| m.remove("timing")) {
                wall.push(t);
            }
            json!({
                "metrics": metrics,
                "prefill_padding": r.prefill_padding,
                "records": r.records,
                "ledger": r.ledger,
            })
        })
        .collect();
    let results = json!({
        "config": { "engine": settings, "batch_size": batch_size, "models": models.describe() },
        "outputs": outputs,
        "totals": summary,
        "batches": batches,
        "wall_clock": { "total": timing(&runs), "batches": wall },
    });
    write_json(&results, out)
}

/// One bench table row. Flat so it serializes to CSV.
#[derive(Debug, Serialize)]
struct BenchRow {
    batch_size: usize,
    mode: Mode,
    tokens: usize,
    decode_steps: usize,
    avg_acceptance_length: f64,
    useful_writes: u64,
    input_padding: u64,
    kv_padding: u64,
    padded_work: u64,
    processed_tokens: u64,
    r_bar_ledger: f64,
    r_bar_records: f64,
    /// Wall-clock fields: informational, not deterministic.
    wall_decode_secs: f64,
    wall_tps: f64,
    wall_speedup: f64,
}

pub fn bench(settings: &EngineSettings, shape: ModelShape, sizes: &[usize], out: &Path) -> Result<()> {
    ensure!(out.is_dir(), "output directory {} does not exist", out.display());
    let models = Models::load(settings, shape)?;
    let prompts: Vec<Vec<u32>> = read_corpus(&settings.corpus)?.iter().map(|l| encode_prompt(l.as_bytes())).collect();
    let mut rows = Vec::new();
    for &b in sizes {
        let greedy = run_corpus(settings, &models, Mode::Greedy, b, &prompts)?;
        let greedy_outputs: Vec<&Vec<u32>> = greedy.iter().flat_map(|r| &r.outputs).collect();
        let greedy_tps = timing(&greedy).tps_incremental;
        for (mode, runs) in [
            (Mode::Greedy, greedy.clone()),
            (Mode::Vanilla, run_corpus(settings, &models, Mode::Vanilla, b, &prompts)?),
            (Mode::Ems, run_corpus(settings, &models, Mode::Ems, b, &prompts)?),
        ] {
            let outputs: Vec<&Vec<u32>> = runs.iter().flat_map(|r| &r.outputs).collect();
            if outputs != greedy_outputs {
                bail!("{mode:?} output differs from greedy at batch size {b}");
            }
            let t = totals(&runs);
            check_consistency(&t, mode)?;
            let wall = timing(&runs);
            rows.push(BenchRow {
                batch_size: b,
                mode,
                tokens: t.tokens,
                decode_steps: t.decode_steps,
                avg_acceptance_length: t.avg_acceptance_length,
                useful_writes: t.useful_writes,
                input_padding: t.input_padding,
                kv_padding: t.kv_padding,
                padded_work: t.padded_work,
                processed_tokens: t.processed_tokens,
                r_bar_ledger: t.r_bar_ledger,
                r_bar_records: t.r_bar_records,
                wall_decode_secs: wall.decode_secs,
                wall_tps: wall.tps_incremental,
                wall_speedup: if greedy_tps > 0.0 { wall.tps_incremental / greedy_tps } else { 0.0 },
            });
        }
    }

    let csv_path = out.join("bench.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let results = json!({
        "config": { "engine": settings, "batch_sizes": sizes, "models": models.describe() },
        "rows": rows,
    });
    write_json(&results, Some(&out.join("bench.json")))?;
    for row in &rows {
        println!(
            "b={:<3} {:<8} tokens={:<6} steps={:<5} padded={:<6} r_bar={:.4} tps={:.0}",
            row.batch_size,
            format!("{:?}", row.mode).to_lowercase(),
            row.tokens,
            row.decode_steps,
            row.padded_work,
            row.r_bar_records,
            row.wall_tps
        );
    }
    Ok(())
}

pub fn simulate_padding(sweep_settings: &SweepSettings, out: Option<&Path>) -> Result<()> {
    let s = sweep_settings;
    let rows = sweep(&s.p_grid, &s.b_grid, s.cap, s.trials, s.seed)?;
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
            write_csv(&rows, BufWriter::new(file))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(&rows, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}
