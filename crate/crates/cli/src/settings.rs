//! Resolved run settings: built-in defaults, overridden by a TOML config
//! file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use emsd::padding::{default_b_grid, default_p_grid, DEFAULT_CAP};
use emsd::predictors::{DEFAULT_COPY_LEN, DEFAULT_DRAFT_K, DEFAULT_MATCH_LEN};
use emsd::{EngineConfig, Mode, ModelConfig, PredictorKind};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;
pub const DEFAULT_TRIALS: u64 = 100_000;
pub const DEFAULT_BENCH_BATCH_SIZES: [usize; 3] = [1, 2, 4];

/// A scalar or a list; `batch_size = 4` and `batch_size = [1, 2, 4]` are
/// both accepted.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Every key a config file may set. All optional; unknown keys are errors.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub predictor: Option<PredictorKind>,
    pub batch_size: Option<OneOrMany<usize>>,
    pub k: Option<usize>,
    pub match_len: Option<usize>,
    pub copy_len: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub stop_on_eos: Option<bool>,
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub draft_model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trials: Option<u64>,
    pub p_grid: Option<Vec<f64>>,
    pub b_grid: Option<Vec<usize>>,
    pub cap: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub hidden: Option<usize>,
    pub max_positions: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Target-model shape, shared by `make-model` and in-memory models.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub max_positions: usize,
}

impl ModelShape {
    pub fn resolve(file: &FileConfig, max_positions: Option<usize>) -> Self {
        let d = ModelConfig::default();
        Self {
            num_layers: file.num_layers.unwrap_or(d.num_layers),
            num_heads: file.num_heads.unwrap_or(d.num_heads),
            hidden: file.hidden.unwrap_or(d.hidden),
            max_positions: max_positions.or(file.max_positions).unwrap_or(d.max_positions),
        }
    }

    /// Target config with `seed`; the draft uses `seed + 1` and one layer.
    pub fn configs(&self, seed: u64) -> (ModelConfig, ModelConfig) {
        let target = ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden: self.hidden,
            max_positions: self.max_positions,
            init_seed: seed,
            ..Default::default()
        };
        (target, target.draft(seed.wrapping_add(1)))
    }
}

/// Engine flags shared by `decode` and `bench`, after merging.
#[derive(Debug, Clone, Serialize)]
pub struct EngineSettings {
    pub mode: Mode,
    pub predictor: PredictorKind,
    pub k: usize,
    pub match_len: usize,
    pub copy_len: usize,
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
    pub seed: u64,
    pub corpus: PathBuf,
    pub model: Option<PathBuf>,
    pub draft_model: Option<PathBuf>,
}

impl EngineSettings {
    pub fn engine_config(&self, mode: Mode, batch_size: usize) -> EngineConfig {
        EngineConfig {
            mode,
            predictor: self.predictor,
            k: self.k,
            match_len: self.match_len,
            copy_len: self.copy_len,
            batch_size,
            max_new_tokens: self.max_new_tokens,
            stop_on_eos: self.stop_on_eos,
            target_seed: self.seed,
            draft_seed: self.seed.wrapping_add(1),
        }
    }
}

/// Flags as parsed, before merging with the config file.
#[derive(Debug, Clone, Default)]
pub struct EngineFlags {
    pub mode: Option<Mode>,
    pub predictor: Option<PredictorKind>,
    pub k: Option<usize>,
    pub match_len: Option<usize>,
    pub copy_len: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub ignore_eos: bool,
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub draft_model: Option<PathBuf>,
}

impl EngineFlags {
    pub fn resolve(self, file: &FileConfig) -> Result<EngineSettings> {
        let corpus = self
            .corpus
            .or_else(|| file.corpus.clone())
            .context("--corpus is required (flag or config key `corpus`)")?;
        Ok(EngineSettings {
            mode: self.mode.or(file.mode).unwrap_or(Mode::Ems),
            predictor: self.predictor.or(file.predictor).unwrap_or(PredictorKind::Retrieval),
            k: self.k.or(file.k).unwrap_or(DEFAULT_DRAFT_K),
            match_len: self.match_len.or(file.match_len).unwrap_or(DEFAULT_MATCH_LEN),
            copy_len: self.copy_len.or(file.copy_len).unwrap_or(DEFAULT_COPY_LEN),
            max_new_tokens: self.max_new_tokens.or(file.max_new_tokens).unwrap_or(DEFAULT_MAX_NEW_TOKENS),
            stop_on_eos: !self.ignore_eos && file.stop_on_eos.unwrap_or(true),
            seed: self.seed.or(file.seed).unwrap_or(0),
            corpus,
            model: self.model.or_else(|| file.model.clone()),
            draft_model: self.draft_model.or_else(|| file.draft_model.clone()),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSettings {
    pub p_grid: Vec<f64>,
    pub b_grid: Vec<usize>,
    pub cap: usize,
    pub trials: u64,
    pub seed: u64,
}

impl SweepSettings {
    pub fn resolve(
        p_grid: Option<Vec<f64>>,
        b_grid: Option<Vec<usize>>,
        cap: Option<usize>,
        trials: Option<u64>,
        seed: Option<u64>,
        file: &FileConfig,
    ) -> Self {
        Self {
            p_grid: p_grid.or_else(|| file.p_grid.clone()).unwrap_or_else(default_p_grid),
            b_grid: b_grid.or_else(|| file.b_grid.clone()).unwrap_or_else(default_b_grid),
            cap: cap.or(file.cap).unwrap_or(DEFAULT_CAP),
            trials: trials.or(file.trials).unwrap_or(DEFAULT_TRIALS),
            seed: seed.or(file.seed).unwrap_or(0),
        }
    }
}
