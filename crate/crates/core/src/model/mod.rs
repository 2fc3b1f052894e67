//! A small deterministic decoder-only transformer.
//!
//! Pre-LayerNorm blocks with multi-head self-attention and a GELU MLP,
//! learned token and position embeddings, and an untied LM head. Weights
//! are drawn from ChaCha8 (see [`Model::init`]), all arithmetic is `f32`
//! and every dot product sums in ascending index order, so one token's
//! logits depend only on its own prefix and never on batch layout.

mod checkpoint;
pub mod ops;
pub mod reference;
pub mod tokenizer;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kv_cache::{CacheError, CacheShape, KvCache, UnpadArena};
use crate::ragged::{restore_indices, RaggedBatch};

pub use ops::{greedy_next, softmax};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("position {position} exceeds max_positions {max}")]
    Capacity { position: usize, max: usize },
    #[error("forward contract violated: {0}")]
    Contract(String),
    #[error("non-finite logits for input {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Model width; `head_dim = hidden / num_heads`.
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            hidden: 32,
            vocab_size: tokenizer::BYTE_VOCAB,
            max_positions: 512,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The draft predictor: same architecture, one layer, its own seed.
    pub fn draft(&self, seed: u64) -> Self {
        Self { num_layers: 1, init_seed: seed, ..*self }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden", self.hidden),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "hidden {} not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(ModelError::Config("vocab_size must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsRow(pub Vec<f32>);

impl LogitsRow {
    pub fn greedy(&self) -> u32 {
        greedy_next(&self.0)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Vec<f32>,
    pub bq: Vec<f32>,
    pub wk: Vec<f32>,
    pub bk: Vec<f32>,
    pub wv: Vec<f32>,
    pub bv: Vec<f32>,
    pub wo: Vec<f32>,
    pub bo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w_up: Vec<f32>,
    pub b_up: Vec<f32>,
    pub w_down: Vec<f32>,
    pub b_down: Vec<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Weights {
    pub tok_emb: Vec<f32>,
    pub pos_emb: Vec<f32>,
    pub layers: Vec<Layer>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    pub lm_head: Vec<f32>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `[-scale, scale)`.
    Uniform(f32),
    Const(f32),
}

impl Weights {
    fn zeroed(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let layer = Layer {
            ln1_gain: vec![0.0; h],
            ln1_bias: vec![0.0; h],
            wq: vec![0.0; h * h],
            bq: vec![0.0; h],
            wk: vec![0.0; h * h],
            bk: vec![0.0; h],
            wv: vec![0.0; h * h],
            bv: vec![0.0; h],
            wo: vec![0.0; h * h],
            bo: vec![0.0; h],
            ln2_gain: vec![0.0; h],
            ln2_bias: vec![0.0; h],
            w_up: vec![0.0; f * h],
            b_up: vec![0.0; f],
            w_down: vec![0.0; h * f],
            b_down: vec![0.0; h],
        };
        Self {
            tok_emb: vec![0.0; cfg.vocab_size * h],
            pos_emb: vec![0.0; cfg.max_positions * h],
            layers: vec![layer; cfg.num_layers],
            lnf_gain: vec![0.0; h],
            lnf_bias: vec![0.0; h],
            lm_head: vec![0.0; cfg.vocab_size * h],
        }
    }

    /// Every tensor in declaration order, with its initializer.
    fn tensors_mut(&mut self, cfg: &ModelConfig) -> Vec<(&mut Vec<f32>, Init)> {
        let in_h = Init::Uniform(1.0 / (cfg.hidden as f32).sqrt());
        let in_f = Init::Uniform(1.0 / (cfg.ffn_dim() as f32).sqrt());
        let mut out: Vec<(&mut Vec<f32>, Init)> =
            vec![(&mut self.tok_emb, Init::Uniform(1.0)), (&mut self.pos_emb, Init::Uniform(0.5))];
        for l in self.layers.iter_mut() {
            out.push((&mut l.ln1_gain, Init::Const(1.0)));
            out.push((&mut l.ln1_bias, Init::Const(0.0)));
            out.push((&mut l.wq, in_h));
            out.push((&mut l.bq, in_h));
            out.push((&mut l.wk, in_h));
            out.push((&mut l.bk, in_h));
            out.push((&mut l.wv, in_h));
            out.push((&mut l.bv, in_h));
            out.push((&mut l.wo, in_h));
            out.push((&mut l.bo, in_h));
            out.push((&mut l.ln2_gain, Init::Const(1.0)));
            out.push((&mut l.ln2_bias, Init::Const(0.0)));
            out.push((&mut l.w_up, in_h));
            out.push((&mut l.b_up, in_h));
            out.push((&mut l.w_down, in_f));
            out.push((&mut l.b_down, in_f));
        }
        out.push((&mut self.lnf_gain, Init::Const(1.0)));
        out.push((&mut self.lnf_bias, Init::Const(0.0)));
        out.push((&mut self.lm_head, in_h));
        out
    }

    pub(crate) fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain[..],
                &l.ln1_bias,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w_up,
                &l.b_up,
                &l.w_down,
                &l.b_down,
            ]);
        }
        out.extend([&self.lnf_gain[..], &self.lnf_bias, &self.lm_head]);
        out
    }
}

/// Where one input token lives: its sample, its position id, and the cache
/// row that receives its key/value. `pad` tokens are written but masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPlacement {
    pub sample: usize,
    pub position: usize,
    pub row: usize,
    pub pad: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub(crate) weights: Weights,
}

impl Model {
    /// Fills all weights from `ChaCha8Rng::seed_from_u64(init_seed)`.
    ///
    /// Tensors are visited in declaration order. Each uniform entry consumes
    /// one `next_u32` and maps it to `(2 * (u >> 8) / 2^24 - 1) * scale`.
    /// LayerNorm gains are 1 and LayerNorm biases 0, neither consuming
    /// randomness.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut weights = Weights::zeroed(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        for (tensor, init) in weights.tensors_mut(&config) {
            match init {
                Init::Const(c) => tensor.iter_mut().for_each(|w| *w = c),
                Init::Uniform(scale) => {
                    for w in tensor.iter_mut() {
                        let unit = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
                        *w = (2.0 * unit - 1.0) * scale;
                    }
                }
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// SHA-256 over all weights as little-endian `f32`, in declaration order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.weights.tensors() {
            for w in t {
                hasher.update(w.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cache shape for `num_samples` samples with `capacity` rows each.
    pub fn cache_shape(&self, num_samples: usize, capacity: usize) -> CacheShape {
        CacheShape { num_layers: self.config.num_layers, kv_dim: self.config.hidden, num_samples, capacity }
    }

    /// Forward over an unpadded batch: each token's position and cache row
    /// are its sample's committed length plus its offset in the chunk.
    pub fn forward_ragged(&self, batch: &RaggedBatch, cache: &mut UnpadArena) -> Result<Vec<LogitsRow>, ModelError> {
        if batch.batch_size() != cache.shape().num_samples {
            return Err(ModelError::Contract(format!(
                "batch of {} samples against a cache of {}",
                batch.batch_size(),
                cache.shape().num_samples
            )));
        }
        let placements: Vec<TokenPlacement> = (0..batch.total_input_token_nums)
            .map(|i| {
                let slot = restore_indices(&batch.token_nums_per_sample, i).expect("in range");
                let s = slot.original_batch_index;
                let pos = cache.committed_len(s) + slot.original_sequence_position;
                TokenPlacement { sample: s, position: pos, row: pos, pad: false }
            })
            .collect();
        self.forward(&batch.concatenated_tokens, &placements, cache)
    }

    /// Runs every input token through the network, writing its keys/values
    /// into `cache` and returning one logits row per token.
    ///
    /// A token at cache row `r` attends to the unmasked rows `[0, r)` of its
    /// own sample plus row `r` itself.
    pub fn forward<C: KvCache + ?Sized>(
        &self,
        tokens: &[u32],
        placements: &[TokenPlacement],
        cache: &mut C,
    ) -> Result<Vec<LogitsRow>, ModelError> {
        let cfg = &self.config;
        let h = cfg.hidden;
        if tokens.len() != placements.len() {
            return Err(ModelError::Contract(format!("{} tokens but {} placements", tokens.len(), placements.len())));
        }
        let shape = cache.shape();
        if shape.num_layers != cfg.num_layers || shape.kv_dim != h {
            return Err(ModelError::Contract("cache shape does not match model".into()));
        }
        for (&t, p) in tokens.iter().zip(placements) {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
            }
            if p.position >= cfg.max_positions {
                return Err(ModelError::Capacity { position: p.position, max: cfg.max_positions });
            }
            if p.sample >= shape.num_samples {
                return Err(ModelError::Contract(format!("sample {} not in cache", p.sample)));
            }
        }

        let n = tokens.len();
        let mut x = vec![0.0f32; n * h];
        for (i, (&t, p)) in tokens.iter().zip(placements).enumerate() {
            let te = &self.weights.tok_emb[t as usize * h..(t as usize + 1) * h];
            let pe = &self.weights.pos_emb[p.position * h..(p.position + 1) * h];
            for j in 0..h {
                x[i * h + j] = te[j] + pe[j];
            }
        }

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let f = cfg.ffn_dim();
        let mut normed = vec![0.0f32; h];
        let mut k = vec![0.0f32; h];
        let mut v = vec![0.0f32; h];
        let mut q = vec![0.0f32; n * h];
        let mut attn = vec![0.0f32; h];
        let mut proj = vec![0.0f32; h];
        let mut up = vec![0.0f32; f];
        let mut scores = Vec::new();
        let mut rows = Vec::new();

        for (l, layer) in self.weights.layers.iter().enumerate() {
            for (i, p) in placements.iter().enumerate() {
                ops::layer_norm(&x[i * h..(i + 1) * h], &layer.ln1_gain, &layer.ln1_bias, &mut normed);
                ops::affine(&layer.wq, &layer.bq, &normed, &mut q[i * h..(i + 1) * h]);
                ops::affine(&layer.wk, &layer.bk, &normed, &mut k);
                ops::affine(&layer.wv, &layer.bv, &normed, &mut v);
                cache.write_kv(p.sample, p.row, l, &k, &v)?;
                if p.pad {
                    cache.mask_row(p.sample, p.row)?;
                }
            }
            for (i, p) in placements.iter().enumerate() {
                if p.row >= cache.readable_len(p.sample) {
                    return Err(ModelError::Contract(format!(
                        "input {i} reads unwritten row {} of sample {}",
                        p.row, p.sample
                    )));
                }
                rows.clear();
                rows.extend((0..p.row).filter(|&r| !cache.is_masked(p.sample, r)));
                rows.push(p.row);
                for head in 0..cfg.num_heads {
                    let span = head * hd..(head + 1) * hd;
                    let qh = &q[i * h + span.start..i * h + span.end];
                    scores.clear();
                    scores.extend(rows.iter().map(|&r| ops::dot(qh, &cache.key(p.sample, r, l)[span.clone()]) * scale));
                    ops::softmax_in_place(&mut scores);
                    let out = &mut attn[span.clone()];
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for (&r, &w) in rows.iter().zip(&scores) {
                        let vh = &cache.value(p.sample, r, l)[span.clone()];
                        for d in 0..hd {
                            out[d] += w * vh[d];
                        }
                    }
                }
                ops::affine(&layer.wo, &layer.bo, &attn, &mut proj);
                let xi = &mut x[i * h..(i + 1) * h];
                for j in 0..h {
                    xi[j] += proj[j];
                }
                mlp(layer, xi, &mut normed, &mut up, &mut proj);
            }
        }

        let mut logits = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.head(&x[i * h..(i + 1) * h]);
            if row.iter().any(|s| !s.is_finite()) {
                return Err(ModelError::NonFinite(i));
            }
            logits.push(LogitsRow(row));
        }
        Ok(logits)
    }

    pub(crate) fn head(&self, x: &[f32]) -> Vec<f32> {
        let mut normed = vec![0.0f32; x.len()];
        ops::layer_norm(x, &self.weights.lnf_gain, &self.weights.lnf_bias, &mut normed);
        let mut row = vec![0.0f32; self.config.vocab_size];
        let zeros = vec![0.0f32; self.config.vocab_size];
        ops::affine(&self.weights.lm_head, &zeros, &normed, &mut row);
        row
    }
}

/// Residual GELU MLP applied in place to one token's hidden state.
pub(crate) fn mlp(layer: &Layer, xi: &mut [f32], normed: &mut [f32], up: &mut [f32], down: &mut [f32]) {
    ops::layer_norm(xi, &layer.ln2_gain, &layer.ln2_bias, normed);
    ops::affine(&layer.w_up, &layer.b_up, normed, up);
    up.iter_mut().for_each(|u| *u = ops::gelu(*u));
    ops::affine(&layer.w_down, &layer.b_down, up, down);
    for j in 0..xi.len() {
        xi[j] += down[j];
    }
}
