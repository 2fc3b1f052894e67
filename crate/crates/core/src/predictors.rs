//! Draft-token predictors.
//!
//! * [`DraftPredictor`]: greedy rollout of a small model, always `k` tokens.
//! * [`RetrievalPredictor`]: copies the continuation of an earlier
//!   occurrence of the context's trailing n-gram, 0 to `copy_len` tokens.
//! * [`OraclePredictor`]: knows the target's greedy continuation and
//!   corrupts it on purpose, either per a fixed script or independently per
//!   token with a given accuracy. Used to drive the engine into exact
//!   acceptance patterns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::kv_cache::{KvCache, UnpadArena};
use crate::model::{Model, ModelError, TokenPlacement};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("draft length must be at least 1")]
    ZeroLength,
    #[error("prediction needs a nonempty context")]
    EmptyContext,
    #[error("context of {context} plus {k} drafts exceeds max_positions {max}")]
    Capacity { context: usize, k: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The prediction phase: drafts for one sample given its full context.
pub trait Predictor {
    /// Returns at most `max_len` draft tokens continuing `context`.
    fn predict(&mut self, sample: usize, context: &[u32], max_len: usize) -> Result<Vec<u32>, PredictError>;

    /// Upper bound on the number of drafts per call.
    fn max_drafts(&self) -> usize;

    fn tag(&self) -> &'static str;
}

/// Drafts for every active sample of one step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PredictionBundle {
    pub drafts: Vec<Vec<u32>>,
    pub tags: Vec<&'static str>,
}

/// Incremental greedy rollout over a private single-sample cache. Rows
/// already cached for a matching prefix of the next context are reused.
#[derive(Debug, Clone)]
pub struct RolloutSession {
    cache: UnpadArena,
    cached: Vec<u32>,
}

impl RolloutSession {
    pub fn new(model: &Model) -> Self {
        let cap = model.config().max_positions;
        Self { cache: UnpadArena::new(model.cache_shape(1, cap)), cached: Vec::new() }
    }

    /// `k` greedy tokens of `model` continuing `context`.
    pub fn rollout(&mut self, model: &Model, context: &[u32], k: usize) -> Result<Vec<u32>, PredictError> {
        let Some((&last, prefix)) = context.split_last() else {
            return Err(PredictError::EmptyContext);
        };
        let max = model.config().max_positions;
        if context.len() + k > max {
            return Err(PredictError::Capacity { context: context.len(), k, max });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let common = self.cached.iter().zip(prefix).take_while(|(a, b)| a == b).count();
        self.cached.truncate(common);
        self.cache.truncate(0, common);
        self.feed(model, &prefix[common..])?;

        let mut out = Vec::with_capacity(k);
        let mut next = last;
        for _ in 0..k {
            let logits = self.feed(model, &[next])?;
            next = logits.last().expect("one row").greedy();
            out.push(next);
        }
        Ok(out)
    }

    fn feed(&mut self, model: &Model, tokens: &[u32]) -> Result<Vec<crate::model::LogitsRow>, PredictError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let base = self.cache.committed_len(0);
        let placements: Vec<TokenPlacement> = (0..tokens.len())
            .map(|j| TokenPlacement { sample: 0, position: base + j, row: base + j, pad: false })
            .collect();
        let logits = model.forward(tokens, &placements, &mut self.cache)?;
        self.cache.commit_prefill(0, tokens.len()).map_err(ModelError::from)?;
        self.cached.extend_from_slice(tokens);
        Ok(logits)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.readable_len(0)
    }
}

/// One-shot greedy rollout of the draft model with a fresh cache.
pub fn draft_predict(context: &[u32], k: usize, draft: &Model) -> Result<Vec<u32>, PredictError> {
    if k == 0 {
        return Err(PredictError::ZeroLength);
    }
    RolloutSession::new(draft).rollout(draft, context, k)
}

/// Default number of drafted tokens per step.
pub const DEFAULT_DRAFT_K: usize = 4;
pub const DEFAULT_MATCH_LEN: usize = 2;
pub const DEFAULT_COPY_LEN: usize = 7;

pub struct DraftPredictor<'m> {
    model: &'m Model,
    k: usize,
    sessions: Vec<RolloutSession>,
}

impl<'m> DraftPredictor<'m> {
    pub fn new(model: &'m Model, k: usize, batch_size: usize) -> Self {
        Self { model, k, sessions: (0..batch_size).map(|_| RolloutSession::new(model)).collect() }
    }
}

impl Predictor for DraftPredictor<'_> {
    fn predict(&mut self, sample: usize, context: &[u32], max_len: usize) -> Result<Vec<u32>, PredictError> {
        let k = self.k.min(max_len);
        self.sessions[sample].rollout(self.model, context, k)
    }

    fn max_drafts(&self) -> usize {
        self.k
    }

    fn tag(&self) -> &'static str {
        "draft"
    }
}

/// Copies up to `copy_len` tokens that followed the most recent earlier
/// occurrence of the context's last `match_len` tokens.
pub fn retrieval_predict(context: &[u32], match_len: usize, copy_len: usize) -> Vec<u32> {
    let n = context.len();
    if match_len == 0 || copy_len == 0 || n <= match_len {
        return Vec::new();
    }
    let suffix = &context[n - match_len..];
    // Candidate starts end before the suffix occurrence itself.
    let hit = context[..n - 1].windows(match_len).rposition(|w| w == suffix);
    match hit {
        Some(start) => {
            let from = start + match_len;
            context[from..(from + copy_len).min(n)].to_vec()
        }
        None => Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalPredictor {
    pub match_len: usize,
    pub copy_len: usize,
}

impl Default for RetrievalPredictor {
    fn default() -> Self {
        Self { match_len: DEFAULT_MATCH_LEN, copy_len: DEFAULT_COPY_LEN }
    }
}

impl Predictor for RetrievalPredictor {
    fn predict(&mut self, _sample: usize, context: &[u32], max_len: usize) -> Result<Vec<u32>, PredictError> {
        let mut out = retrieval_predict(context, self.match_len, self.copy_len);
        out.truncate(max_len);
        Ok(out)
    }

    fn max_drafts(&self) -> usize {
        self.copy_len
    }

    fn tag(&self) -> &'static str {
        "retrieval"
    }
}

/// One scripted prediction: draft `predict` tokens of which exactly the
/// first `correct` match the target (`correct == predict` means all do).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedStep {
    pub predict: usize,
    pub correct: usize,
}

impl ScriptedStep {
    /// The acceptance length this step produces.
    pub fn tau(&self) -> usize {
        self.correct.min(self.predict) + 1
    }
}

enum OraclePolicy {
    Accuracy { p: f64, k: usize, rngs: Vec<ChaCha8Rng> },
    Scripted { steps: Vec<Vec<ScriptedStep>>, cursor: Vec<usize>, fallback: ScriptedStep },
}

/// Predictor with access to the target model's own greedy continuation.
pub struct OraclePredictor<'m> {
    target: &'m Model,
    sessions: Vec<RolloutSession>,
    policy: OraclePolicy,
}

impl<'m> OraclePredictor<'m> {
    /// Each of `k` drafts matches the target independently with probability
    /// `p`, so the acceptance length is geometric truncated at `k + 1`.
    pub fn with_accuracy(target: &'m Model, p: f64, k: usize, batch_size: usize, seed: u64) -> Self {
        let rngs = (0..batch_size)
            .map(|s| ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            .collect();
        Self {
            target,
            sessions: (0..batch_size).map(|_| RolloutSession::new(target)).collect(),
            policy: OraclePolicy::Accuracy { p, k, rngs },
        }
    }

    /// Replays `steps[sample]` in order; once exhausted, predicts nothing.
    pub fn scripted(target: &'m Model, steps: Vec<Vec<ScriptedStep>>) -> Self {
        let batch = steps.len();
        Self {
            target,
            sessions: (0..batch).map(|_| RolloutSession::new(target)).collect(),
            policy: OraclePolicy::Scripted {
                steps,
                cursor: vec![0; batch],
                fallback: ScriptedStep { predict: 0, correct: 0 },
            },
        }
    }
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&mut self, sample: usize, context: &[u32], max_len: usize) -> Result<Vec<u32>, PredictError> {
        let (k, correct) = match &mut self.policy {
            OraclePolicy::Accuracy { k, .. } => (*k, None),
            OraclePolicy::Scripted { steps, cursor, fallback } => {
                let step = steps[sample].get(cursor[sample]).copied().unwrap_or(*fallback);
                cursor[sample] += 1;
                (step.predict, Some(step.correct))
            }
        };
        let k = k.min(max_len);
        let mut drafts = self.sessions[sample].rollout(self.target, context, k)?;
        let vocab = self.target.config().vocab_size as u32;
        match &mut self.policy {
            OraclePolicy::Accuracy { p, rngs, .. } => {
                let rng = &mut rngs[sample];
                for d in drafts.iter_mut() {
                    if !rng.random_bool(*p) {
                        *d = (*d + rng.random_range(1..vocab)) % vocab;
                    }
                }
            }
            OraclePolicy::Scripted { .. } => {
                if let Some(d) = correct.and_then(|c| drafts.get_mut(c)) {
                    *d = (*d + 1) % vocab;
                }
            }
        }
        Ok(drafts)
    }

    fn max_drafts(&self) -> usize {
        match &self.policy {
            OraclePolicy::Accuracy { k, .. } => *k,
            OraclePolicy::Scripted { steps, .. } => steps.iter().flatten().map(|s| s.predict).max().unwrap_or(0),
        }
    }

    fn tag(&self) -> &'static str {
        "oracle"
    }
}
