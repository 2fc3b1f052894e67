//! Decoding loops.
//!
//! [`decode_greedy`] is plain one-token-per-step greedy decoding, run per
//! sample in isolation. [`decode_speculative`] drafts with a [`Predictor`],
//! verifies all drafts in one forward pass and commits the accepted prefix
//! plus the target's correction. Two batching modes share that loop:
//!
//! * [`Mode::Vanilla`] right-pads every input to the longest one and keeps
//!   the cache aligned, so each sample advances by the batch's largest
//!   acceptance length.
//! * [`Mode::Ems`] concatenates the inputs without padding and lets each
//!   sample's cache advance by its own acceptance length.
//!
//! Both emit exactly the tokens greedy decoding emits.

mod metrics;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv_cache::{AlignedGrid, CacheError, KvCache, UnpadArena, WriteLedger};
use crate::model::tokenizer::{EOS, PAD};
use crate::model::{LogitsRow, Model, ModelError, TokenPlacement};
use crate::predictors::{
    DraftPredictor, OraclePredictor, PredictError, PredictionBundle, Predictor, RetrievalPredictor, DEFAULT_COPY_LEN,
    DEFAULT_DRAFT_K, DEFAULT_MATCH_LEN,
};
use crate::ragged::concatenate_inputs;

pub use metrics::{compute_metrics, RunMetrics, SampleStep, StepRecord, Timing};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("prompt {sample} of {prompt} tokens plus {budget} new tokens exceeds max_positions {max}")]
    Capacity { sample: usize, prompt: usize, budget: usize, max: usize },
    #[error("verification contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Vanilla,
    Ems,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Draft,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub mode: Mode,
    pub predictor: PredictorKind,
    /// Draft length for the draft-model predictor.
    pub k: usize,
    pub match_len: usize,
    pub copy_len: usize,
    pub batch_size: usize,
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
    pub target_seed: u64,
    pub draft_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ems,
            predictor: PredictorKind::Retrieval,
            k: DEFAULT_DRAFT_K,
            match_len: DEFAULT_MATCH_LEN,
            copy_len: DEFAULT_COPY_LEN,
            batch_size: 1,
            max_new_tokens: 64,
            stop_on_eos: true,
            target_seed: 0,
            draft_seed: 1,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let checks = [
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.k >= 1, "k must be at least 1"),
            (self.match_len >= 1, "match_len must be at least 1"),
            (self.copy_len >= 1, "copy_len must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(EngineError::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub accepted: Vec<u32>,
    pub tau: usize,
}

/// Greedy verification of `drafts` against `target_logits`.
///
/// Row `j` holds the target's prediction after the last committed token
/// and the first `j` drafts. Accepts target tokens up to and including the
/// first one that disagrees with its draft; when every draft agrees the
/// final row contributes a bonus token, giving `tau = k + 1`.
pub fn verify(target_logits: &[LogitsRow], drafts: &[u32]) -> Result<Verification, EngineError> {
    if target_logits.len() != drafts.len() + 1 {
        return Err(EngineError::Contract(format!("{} logit rows for {} drafts", target_logits.len(), drafts.len())));
    }
    let mut accepted = Vec::with_capacity(target_logits.len());
    for (j, row) in target_logits.iter().enumerate() {
        let x = row.greedy();
        accepted.push(x);
        if drafts.get(j) != Some(&x) {
            break;
        }
    }
    let tau = accepted.len();
    Ok(Verification { accepted, tau })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DecodeOutput {
    /// Generated tokens per sample, prompt excluded.
    pub outputs: Vec<Vec<u32>>,
    pub metrics: RunMetrics,
    pub records: Vec<StepRecord>,
    /// Cache accounting; absent for greedy decoding.
    pub ledger: Option<WriteLedger>,
    /// PAD rows written while aligning prompts of unequal length.
    pub prefill_padding: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    pub stop_on_eos: bool,
}

impl From<&EngineConfig> for DecodeOptions {
    fn from(c: &EngineConfig) -> Self {
        Self { max_new_tokens: c.max_new_tokens, stop_on_eos: c.stop_on_eos }
    }
}

fn check_prompts(model: &Model, prompts: &[Vec<u32>], budget: usize) -> Result<(), EngineError> {
    if prompts.is_empty() {
        return Err(EngineError::Config("empty batch".into()));
    }
    let max = model.config().max_positions;
    for (s, p) in prompts.iter().enumerate() {
        if p.is_empty() {
            return Err(EngineError::Config(format!("prompt {s} is empty")));
        }
        if p.len() + budget > max {
            return Err(EngineError::Capacity { sample: s, prompt: p.len(), budget, max });
        }
        if let Some(&t) = p.iter().find(|&&t| t as usize >= model.config().vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: model.config().vocab_size }.into());
        }
    }
    Ok(())
}

/// Appends `tokens` to a sample's output, honoring the budget and EOS.
/// Returns how many were appended and whether the sample is finished.
fn append_tokens(out: &mut Vec<u32>, tokens: &[u32], opts: &DecodeOptions) -> (usize, bool) {
    let mut n = 0;
    for &t in tokens {
        if out.len() >= opts.max_new_tokens {
            break;
        }
        out.push(t);
        n += 1;
        if opts.stop_on_eos && t == EOS {
            return (n, true);
        }
    }
    (n, out.len() >= opts.max_new_tokens)
}

/// Autoregressive greedy decoding, each sample on its own cache.
pub fn decode_greedy(model: &Model, prompts: &[Vec<u32>], opts: DecodeOptions) -> Result<DecodeOutput, EngineError> {
    check_prompts(model, prompts, opts.max_new_tokens)?;
    let mut outputs = Vec::with_capacity(prompts.len());
    let mut processed = 0u64;
    let mut prefill_secs = 0.0;
    let mut decode_secs = 0.0;
    for prompt in prompts {
        let start = Instant::now();
        let mut cache = UnpadArena::new(model.cache_shape(1, model.config().max_positions));
        let (&last, prefix) = prompt.split_last().expect("checked nonempty");
        if !prefix.is_empty() {
            model.forward_ragged(&concatenate_inputs(&[prefix]), &mut cache)?;
            cache.commit_prefill(0, prefix.len())?;
        }
        prefill_secs += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let mut out = Vec::new();
        let mut next = last;
        let mut done = opts.max_new_tokens == 0;
        while !done {
            let logits = model.forward_ragged(&concatenate_inputs(&[[next]]), &mut cache)?;
            cache.commit_prefill(0, 1)?;
            processed += 1;
            next = logits[0].greedy();
            done = append_tokens(&mut out, &[next], &opts).1;
        }
        decode_secs += start.elapsed().as_secs_f64();
        outputs.push(out);
    }
    let tokens_generated: Vec<usize> = outputs.iter().map(Vec::len).collect();
    let total: usize = tokens_generated.iter().sum();
    let metrics = RunMetrics {
        decode_steps: tokens_generated.iter().copied().max().unwrap_or(0),
        avg_acceptance_length: if total > 0 { 1.0 } else { 0.0 },
        useful_writes: total as u64,
        processed_tokens: processed,
        tokens_generated,
        timing: Timing::new(prefill_secs, decode_secs, total),
        ..Default::default()
    };
    Ok(DecodeOutput { outputs, metrics, records: Vec::new(), ledger: None, prefill_padding: 0 })
}

enum BatchCache {
    Unpad(UnpadArena),
    Aligned(AlignedGrid),
}

impl BatchCache {
    fn ledger(&self) -> &WriteLedger {
        match self {
            BatchCache::Unpad(c) => c.ledger(),
            BatchCache::Aligned(c) => c.ledger(),
        }
    }
}

/// Step inputs laid out for the forward pass, with each sample's logits
/// rows located in the output.
struct StepLayout {
    tokens: Vec<u32>,
    placements: Vec<TokenPlacement>,
    /// Start of each sample's rows in the flat output.
    offsets: Vec<usize>,
    input_padding: Vec<usize>,
}

fn layout_unpadded(cache: &UnpadArena, inputs: &[Vec<u32>]) -> StepLayout {
    let batch = concatenate_inputs(inputs);
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut acc = 0;
    for &c in &batch.token_nums_per_sample {
        offsets.push(acc);
        acc += c;
    }
    let placements = batch
        .slots()
        .map(|slot| {
            let s = slot.original_batch_index;
            let pos = cache.committed_len(s) + slot.original_sequence_position;
            TokenPlacement { sample: s, position: pos, row: pos, pad: false }
        })
        .collect();
    StepLayout { tokens: batch.concatenated_tokens, placements, offsets, input_padding: vec![0; inputs.len()] }
}

/// Pads every input to the same width. Real tokens sit on the right when
/// `left_pad` is set (prompt prefill) and on the left otherwise.
fn layout_aligned(cache: &AlignedGrid, inputs: &[Vec<u32>], left_pad: bool) -> StepLayout {
    let width = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let mut layout = StepLayout {
        tokens: Vec::with_capacity(width * inputs.len()),
        placements: Vec::with_capacity(width * inputs.len()),
        offsets: Vec::with_capacity(inputs.len()),
        input_padding: Vec::with_capacity(inputs.len()),
    };
    for (s, input) in inputs.iter().enumerate() {
        let pads = width - input.len();
        let first_real = if left_pad { pads } else { 0 };
        layout.offsets.push(layout.tokens.len() + first_real);
        layout.input_padding.push(pads);
        for j in 0..width {
            let row = cache.aligned_len() + j;
            match j.checked_sub(first_real).filter(|&i| i < input.len()) {
                Some(i) => {
                    layout.tokens.push(input[i]);
                    layout.placements.push(TokenPlacement {
                        sample: s,
                        position: cache.logical_len(s) + i,
                        row,
                        pad: false,
                    });
                }
                None => {
                    layout.tokens.push(PAD);
                    layout.placements.push(TokenPlacement { sample: s, position: 0, row, pad: true });
                }
            }
        }
    }
    layout
}

/// Multi-sample speculative decoding in vanilla or EMS mode.
pub fn decode_speculative(
    model: &Model,
    prompts: &[Vec<u32>],
    mode: Mode,
    predictor: &mut dyn Predictor,
    opts: DecodeOptions,
) -> Result<DecodeOutput, EngineError> {
    check_prompts(model, prompts, opts.max_new_tokens)?;
    let b = prompts.len();
    let vocab = model.config().vocab_size as u32;
    let k_max = predictor.max_drafts();

    let prefill_start = Instant::now();
    let prefixes: Vec<Vec<u32>> = prompts.iter().map(|p| p[..p.len() - 1].to_vec()).collect();
    let mut cache = match mode {
        Mode::Greedy => return Err(EngineError::Config("greedy mode has no speculative loop".into())),
        Mode::Ems => {
            let mut arena = UnpadArena::new(model.cache_shape(b, model.config().max_positions));
            let layout = layout_unpadded(&arena, &prefixes);
            if !layout.tokens.is_empty() {
                model.forward(&layout.tokens, &layout.placements, &mut arena)?;
            }
            for (s, p) in prefixes.iter().enumerate() {
                arena.commit_prefill(s, p.len())?;
            }
            BatchCache::Unpad(arena)
        }
        Mode::Vanilla => {
            let width = prefixes.iter().map(Vec::len).max().unwrap_or(0);
            let rows = width + (opts.max_new_tokens + 1) * (k_max + 1);
            let mut grid = AlignedGrid::new(model.cache_shape(b, rows));
            let layout = layout_aligned(&grid, &prefixes, true);
            if !layout.tokens.is_empty() {
                model.forward(&layout.tokens, &layout.placements, &mut grid)?;
            }
            let real: Vec<usize> = prefixes.iter().map(Vec::len).collect();
            grid.commit_prefill(&real, width)?;
            BatchCache::Aligned(grid)
        }
    };
    let prefill_secs = prefill_start.elapsed().as_secs_f64();

    let decode_start = Instant::now();
    let mut contexts: Vec<Vec<u32>> = prompts.to_vec();
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut active = vec![opts.max_new_tokens > 0; b];
    let mut records = Vec::new();

    while active.iter().any(|&a| a) {
        let mut bundle = PredictionBundle::default();
        for s in 0..b {
            if !active[s] {
                bundle.drafts.push(Vec::new());
                bundle.tags.push("idle");
                continue;
            }
            let max_len = opts.max_new_tokens - outputs[s].len() - 1;
            let drafts = predictor.predict(s, &contexts[s], max_len)?;
            if drafts.len() > max_len.min(k_max) || drafts.iter().any(|&t| t >= vocab) {
                return Err(EngineError::Contract(format!(
                    "predictor {} returned an invalid draft for sample {s}",
                    predictor.tag()
                )));
            }
            bundle.drafts.push(drafts);
            bundle.tags.push(predictor.tag());
        }
        let inputs: Vec<Vec<u32>> = (0..b)
            .map(|s| {
                if active[s] {
                    let mut v = vec![*contexts[s].last().unwrap()];
                    v.extend_from_slice(&bundle.drafts[s]);
                    v
                } else {
                    Vec::new()
                }
            })
            .collect();

        let (layout, logits) = match &mut cache {
            BatchCache::Unpad(arena) => {
                let layout = layout_unpadded(arena, &inputs);
                let logits = model.forward(&layout.tokens, &layout.placements, arena)?;
                (layout, logits)
            }
            BatchCache::Aligned(grid) => {
                let layout = layout_aligned(grid, &inputs, false);
                let logits = model.forward(&layout.tokens, &layout.placements, grid)?;
                (layout, logits)
            }
        };

        let mut samples = Vec::with_capacity(b);
        let mut taus = vec![0usize; b];
        for s in 0..b {
            let mut step = SampleStep { input_padding: layout.input_padding[s], ..Default::default() };
            if active[s] {
                let start = layout.offsets[s];
                let rows = &logits[start..start + inputs[s].len()];
                let v = verify(rows, &bundle.drafts[s])?;
                // Drafts never exceed the remaining budget, so only EOS can
                // cut the accepted run short.
                let (appended, done) = append_tokens(&mut outputs[s], &v.accepted, &opts);
                contexts[s].extend_from_slice(&v.accepted[..appended]);
                taus[s] = appended;
                active[s] = !done;
                step.active = true;
                step.predicted = bundle.drafts[s].len();
                step.tau = appended;
            }
            samples.push(step);
        }

        match &mut cache {
            BatchCache::Unpad(arena) => {
                arena.commit_step(&taus)?;
            }
            BatchCache::Aligned(grid) => {
                let tau_max = grid.commit_padded(&taus)?.tau_max;
                for (step, &tau) in samples.iter_mut().zip(&taus) {
                    step.kv_padding = tau_max - tau;
                }
            }
        }
        let kv_padding: usize = samples.iter().map(|s| s.kv_padding).sum();
        records.push(StepRecord::new(samples, layout.tokens.len() + kv_padding));
    }
    let decode_secs = decode_start.elapsed().as_secs_f64();

    let mut metrics = compute_metrics(&records);
    if records.is_empty() {
        metrics.tokens_generated = vec![0; b];
    }
    debug_assert!(metrics.tokens_generated.iter().zip(&outputs).all(|(&n, o)| n == o.len()));
    let total: usize = outputs.iter().map(Vec::len).sum();
    metrics.timing = Timing::new(prefill_secs, decode_secs, total);
    let ledger = cache.ledger().clone();
    Ok(DecodeOutput { outputs, metrics, records, prefill_padding: ledger.prefill_padding, ledger: Some(ledger) })
}

/// Runs `config.mode` with the predictor it names. `draft` is required for
/// the draft-model predictor.
pub fn decode(
    config: &EngineConfig,
    target: &Model,
    draft: Option<&Model>,
    prompts: &[Vec<u32>],
) -> Result<DecodeOutput, EngineError> {
    config.validate()?;
    let opts = DecodeOptions::from(config);
    if config.mode == Mode::Greedy {
        return decode_greedy(target, prompts, opts);
    }
    match config.predictor {
        PredictorKind::Draft => {
            let draft = draft.ok_or_else(|| EngineError::Config("draft predictor needs a draft model".into()))?;
            if draft.config().vocab_size != target.config().vocab_size {
                return Err(EngineError::Config("draft and target vocabularies differ".into()));
            }
            let mut p = DraftPredictor::new(draft, config.k, prompts.len());
            decode_speculative(target, prompts, config.mode, &mut p, opts)
        }
        PredictorKind::Retrieval => {
            let mut p = RetrievalPredictor { match_len: config.match_len, copy_len: config.copy_len };
            decode_speculative(target, prompts, config.mode, &mut p, opts)
        }
    }
}

/// Speculative decoding driven by the target's own continuation with
/// per-draft accuracy `p`.
pub fn decode_with_accuracy(
    target: &Model,
    prompts: &[Vec<u32>],
    mode: Mode,
    p: f64,
    k: usize,
    seed: u64,
    opts: DecodeOptions,
) -> Result<DecodeOutput, EngineError> {
    let mut oracle = OraclePredictor::with_accuracy(target, p, k, prompts.len(), seed);
    decode_speculative(target, prompts, mode, &mut oracle, opts)
}
