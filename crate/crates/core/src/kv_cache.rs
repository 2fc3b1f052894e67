//! Key/value cache managers.
//!
//! Both managers expose the same [`KvCache`] read/write contract to the
//! forward pass and differ only in how a verification step is committed:
//!
//! * [`UnpadArena`] gives every sample its own start offset in a shared
//!   arena. A sample that accepts `tau` tokens advances by exactly `tau` and
//!   nothing else is written.
//! * [`AlignedGrid`] keeps one row cursor for the whole batch. After a step
//!   every sample advances by the batch maximum and the shortfall is filled
//!   with masked padding slots.
//!
//! Rows are token slots. A row holds one key and one value vector of
//! `kv_dim` floats per layer.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("cache capacity exceeded: sample {sample} row {row} >= capacity {capacity}")]
    Capacity { sample: usize, row: usize, capacity: usize },
    #[error("sample {sample} out of range for batch of {batch}")]
    SampleOutOfRange { sample: usize, batch: usize },
    #[error("cache contract violated: {0}")]
    Contract(String),
    #[error("padding ratio is undefined before the first committed step")]
    NoSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheShape {
    pub num_layers: usize,
    pub kv_dim: usize,
    pub num_samples: usize,
    /// Rows available to each sample.
    pub capacity: usize,
}

/// Storage contract used by the forward pass.
pub trait KvCache {
    fn shape(&self) -> CacheShape;

    /// Stores one token's key and value for `layer` and marks the row visible.
    fn write_kv(&mut self, sample: usize, row: usize, layer: usize, k: &[f32], v: &[f32]) -> Result<(), CacheError>;

    /// Excludes a padding row from attention.
    fn mask_row(&mut self, sample: usize, row: usize) -> Result<(), CacheError>;

    fn key(&self, sample: usize, row: usize, layer: usize) -> &[f32];

    fn value(&self, sample: usize, row: usize, layer: usize) -> &[f32];

    fn is_masked(&self, sample: usize, row: usize) -> bool;

    /// Committed rows plus rows written during the current step.
    fn readable_len(&self, sample: usize) -> usize;

    fn ledger(&self) -> &WriteLedger;
}

/// One committed verification step as seen by the cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerStep {
    pub tau_list: Vec<usize>,
    pub tau_max: usize,
    pub pad_writes: u64,
    pub useful_writes: u64,
}

impl LedgerStep {
    /// Padding share of this step's committed slots.
    pub fn padding_ratio(&self) -> f64 {
        let total = self.pad_writes + self.useful_writes;
        if total == 0 {
            0.0
        } else {
            self.pad_writes as f64 / total as f64
        }
    }
}

/// Committed-slot accounting, in token-slot units.
///
/// `useful` counts slots committed with real tokens and `padding` counts
/// PAD slots inserted to keep samples aligned. Prefill is tracked apart from
/// decode steps. `physical_writes` counts every per-layer store, including
/// in-flight slots that were later discarded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WriteLedger {
    pub useful: Vec<u64>,
    pub padding: Vec<u64>,
    pub prefill_useful: u64,
    pub prefill_padding: u64,
    pub physical_writes: u64,
    pub steps: Vec<LedgerStep>,
}

impl WriteLedger {
    fn new(num_samples: usize) -> Self {
        Self { useful: vec![0; num_samples], padding: vec![0; num_samples], ..Default::default() }
    }

    pub fn total_useful(&self) -> u64 {
        self.useful.iter().sum()
    }

    pub fn total_padding(&self) -> u64 {
        self.padding.iter().sum()
    }

    /// Decode-step slot writes, useful plus padding.
    pub fn total_writes(&self) -> u64 {
        self.total_useful() + self.total_padding()
    }

    /// Mean over steps of `pad_writes / (pad_writes + useful_writes)`.
    ///
    /// For an aligned step this is `(tau_max - mean tau) / tau_max`.
    pub fn padding_ratio(&self) -> Result<f64, CacheError> {
        if self.steps.is_empty() {
            return Err(CacheError::NoSteps);
        }
        let sum: f64 = self.steps.iter().map(LedgerStep::padding_ratio).sum();
        Ok(sum / self.steps.len() as f64)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("ledger is always serializable")
    }
}

/// Contiguous per-layer storage addressed by absolute arena row.
#[derive(Debug, Clone)]
struct LayerStore {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    kv_dim: usize,
}

impl LayerStore {
    fn new(num_layers: usize, rows: usize, kv_dim: usize) -> Self {
        Self {
            keys: vec![vec![0.0; rows * kv_dim]; num_layers],
            values: vec![vec![0.0; rows * kv_dim]; num_layers],
            kv_dim,
        }
    }

    fn store(&mut self, layer: usize, abs_row: usize, k: &[f32], v: &[f32]) {
        let d = self.kv_dim;
        self.keys[layer][abs_row * d..(abs_row + 1) * d].copy_from_slice(k);
        self.values[layer][abs_row * d..(abs_row + 1) * d].copy_from_slice(v);
    }

    fn key(&self, layer: usize, abs_row: usize) -> &[f32] {
        &self.keys[layer][abs_row * self.kv_dim..(abs_row + 1) * self.kv_dim]
    }

    fn value(&self, layer: usize, abs_row: usize) -> &[f32] {
        &self.values[layer][abs_row * self.kv_dim..(abs_row + 1) * self.kv_dim]
    }
}

fn check_vec_len(shape: &CacheShape, k: &[f32], v: &[f32]) -> Result<(), CacheError> {
    if k.len() != shape.kv_dim || v.len() != shape.kv_dim {
        return Err(CacheError::Contract(format!(
            "kv vectors of length {}/{} do not match kv_dim {}",
            k.len(),
            v.len(),
            shape.kv_dim
        )));
    }
    Ok(())
}

fn check_layer(shape: &CacheShape, layer: usize) -> Result<(), CacheError> {
    if layer >= shape.num_layers {
        return Err(CacheError::Contract(format!("layer {layer} out of range for {} layers", shape.num_layers)));
    }
    Ok(())
}

/// Unpadded cache: one shared arena, each sample owning the disjoint extent
/// `[start_offset, start_offset + capacity)`.
#[derive(Debug, Clone)]
pub struct UnpadArena {
    shape: CacheShape,
    store: LayerStore,
    start_offset: Vec<usize>,
    committed: Vec<usize>,
    inflight: Vec<usize>,
    ledger: WriteLedger,
}

impl UnpadArena {
    pub fn new(shape: CacheShape) -> Self {
        let rows = shape.num_samples * shape.capacity;
        Self {
            shape,
            store: LayerStore::new(shape.num_layers, rows, shape.kv_dim),
            start_offset: (0..shape.num_samples).map(|s| s * shape.capacity).collect(),
            committed: vec![0; shape.num_samples],
            inflight: vec![0; shape.num_samples],
            ledger: WriteLedger::new(shape.num_samples),
        }
    }

    pub fn committed_len(&self, sample: usize) -> usize {
        self.committed[sample]
    }

    pub fn start_offset(&self, sample: usize) -> usize {
        self.start_offset[sample]
    }

    fn check_sample(&self, sample: usize) -> Result<(), CacheError> {
        if sample >= self.shape.num_samples {
            return Err(CacheError::SampleOutOfRange { sample, batch: self.shape.num_samples });
        }
        Ok(())
    }

    /// Advances the sample's committed length by `tau` accepted slots.
    /// In-flight slots beyond `tau` become dead and are overwritten later.
    pub fn commit_accepted(&mut self, sample: usize, tau: usize) -> Result<(), CacheError> {
        self.check_sample(sample)?;
        if tau == 0 || tau > self.inflight[sample] {
            return Err(CacheError::Contract(format!(
                "sample {sample}: tau {tau} outside [1, {}]",
                self.inflight[sample]
            )));
        }
        self.committed[sample] += tau;
        self.inflight[sample] = 0;
        self.ledger.useful[sample] += tau as u64;
        Ok(())
    }

    /// Commits one verification step for the whole batch. A zero entry marks
    /// an idle sample that fed no tokens this step.
    pub fn commit_step(&mut self, taus: &[usize]) -> Result<&LedgerStep, CacheError> {
        if taus.len() != self.shape.num_samples {
            return Err(CacheError::Contract(format!("{} taus for a batch of {}", taus.len(), self.shape.num_samples)));
        }
        let tau_max = taus.iter().copied().max().unwrap_or(0);
        if tau_max == 0 {
            return Err(CacheError::Contract("step with no active sample".into()));
        }
        for (s, &tau) in taus.iter().enumerate() {
            if tau > 0 {
                self.commit_accepted(s, tau)?;
            } else {
                self.inflight[s] = 0;
            }
        }
        self.ledger.steps.push(LedgerStep {
            tau_list: taus.to_vec(),
            tau_max,
            pad_writes: 0,
            useful_writes: taus.iter().map(|&t| t as u64).sum(),
        });
        Ok(self.ledger.steps.last().unwrap())
    }

    /// Commits prompt rows written outside of a verification step.
    pub fn commit_prefill(&mut self, sample: usize, len: usize) -> Result<(), CacheError> {
        self.check_sample(sample)?;
        if len > self.inflight[sample] {
            return Err(CacheError::Contract(format!(
                "sample {sample}: prefill of {len} rows but only {} written",
                self.inflight[sample]
            )));
        }
        self.committed[sample] += len;
        self.inflight[sample] = 0;
        self.ledger.prefill_useful += len as u64;
        Ok(())
    }

    /// Drops committed rows beyond `len` (used by rollout sessions that
    /// rewind after speculative tokens were rejected).
    pub fn truncate(&mut self, sample: usize, len: usize) {
        self.committed[sample] = self.committed[sample].min(len);
        self.inflight[sample] = 0;
    }
}

impl KvCache for UnpadArena {
    fn shape(&self) -> CacheShape {
        self.shape
    }

    fn write_kv(&mut self, sample: usize, row: usize, layer: usize, k: &[f32], v: &[f32]) -> Result<(), CacheError> {
        self.check_sample(sample)?;
        check_layer(&self.shape, layer)?;
        check_vec_len(&self.shape, k, v)?;
        if row >= self.shape.capacity {
            return Err(CacheError::Capacity { sample, row, capacity: self.shape.capacity });
        }
        let committed = self.committed[sample];
        if row < committed || row > committed + self.inflight[sample] {
            return Err(CacheError::Contract(format!(
                "sample {sample}: write at row {row} outside in-flight window starting at {committed}"
            )));
        }
        self.inflight[sample] = self.inflight[sample].max(row - committed + 1);
        self.store.store(layer, self.start_offset[sample] + row, k, v);
        self.ledger.physical_writes += 1;
        Ok(())
    }

    fn mask_row(&mut self, _sample: usize, _row: usize) -> Result<(), CacheError> {
        Err(CacheError::Contract("the unpadded arena never stores padding".into()))
    }

    fn key(&self, sample: usize, row: usize, layer: usize) -> &[f32] {
        self.store.key(layer, self.start_offset[sample] + row)
    }

    fn value(&self, sample: usize, row: usize, layer: usize) -> &[f32] {
        self.store.value(layer, self.start_offset[sample] + row)
    }

    fn is_masked(&self, _sample: usize, _row: usize) -> bool {
        false
    }

    fn readable_len(&self, sample: usize) -> usize {
        self.committed[sample] + self.inflight[sample]
    }

    fn ledger(&self) -> &WriteLedger {
        &self.ledger
    }
}

/// Aligned (padded) cache: every sample shares the same row cursor, padding
/// rows are kept and masked.
#[derive(Debug, Clone)]
pub struct AlignedGrid {
    shape: CacheShape,
    store: LayerStore,
    visible: Vec<bool>,
    aligned_len: usize,
    inflight: usize,
    logical_len: Vec<usize>,
    ledger: WriteLedger,
}

impl AlignedGrid {
    pub fn new(shape: CacheShape) -> Self {
        let rows = shape.num_samples * shape.capacity;
        Self {
            shape,
            store: LayerStore::new(shape.num_layers, rows, shape.kv_dim),
            visible: vec![false; rows],
            aligned_len: 0,
            inflight: 0,
            logical_len: vec![0; shape.num_samples],
            ledger: WriteLedger::new(shape.num_samples),
        }
    }

    /// Row cursor shared by all samples.
    pub fn aligned_len(&self) -> usize {
        self.aligned_len
    }

    /// Number of real (non-padding) tokens committed for the sample.
    pub fn logical_len(&self, sample: usize) -> usize {
        self.logical_len[sample]
    }

    fn abs(&self, sample: usize, row: usize) -> usize {
        sample * self.shape.capacity + row
    }

    fn write_pad_slot(&mut self, sample: usize, row: usize) -> Result<(), CacheError> {
        if row >= self.shape.capacity {
            return Err(CacheError::Capacity { sample, row, capacity: self.shape.capacity });
        }
        let zeros = vec![0.0; self.shape.kv_dim];
        let abs = self.abs(sample, row);
        for layer in 0..self.shape.num_layers {
            self.store.store(layer, abs, &zeros, &zeros);
            self.ledger.physical_writes += 1;
        }
        self.visible[abs] = false;
        Ok(())
    }

    /// Commits a verification step: every sample advances by `max(taus)` and
    /// sample `s` gets `max(taus) - taus[s]` masked PAD slots. A zero entry
    /// is an idle sample whose whole advance is padding.
    pub fn commit_padded(&mut self, taus: &[usize]) -> Result<&LedgerStep, CacheError> {
        if taus.is_empty() {
            return Err(CacheError::Contract("empty batch".into()));
        }
        if taus.len() != self.shape.num_samples {
            return Err(CacheError::Contract(format!("{} taus for a batch of {}", taus.len(), self.shape.num_samples)));
        }
        let tau_max = taus.iter().copied().max().unwrap();
        if tau_max == 0 {
            return Err(CacheError::Contract("step with no active sample".into()));
        }
        if let Some(&bad) = taus.iter().find(|&&t| t > self.inflight) {
            return Err(CacheError::Contract(format!(
                "tau {bad} exceeds the {} rows written this step",
                self.inflight
            )));
        }
        let base = self.aligned_len;
        let mut pad_writes = 0u64;
        for (s, &tau) in taus.iter().enumerate() {
            for row in base + tau..base + tau_max {
                self.write_pad_slot(s, row)?;
            }
            let pads = (tau_max - tau) as u64;
            pad_writes += pads;
            self.logical_len[s] += tau;
            self.ledger.useful[s] += tau as u64;
            self.ledger.padding[s] += pads;
        }
        self.aligned_len += tau_max;
        self.inflight = 0;
        self.ledger.steps.push(LedgerStep {
            tau_list: taus.to_vec(),
            tau_max,
            pad_writes,
            useful_writes: taus.iter().map(|&t| t as u64).sum(),
        });
        Ok(self.ledger.steps.last().unwrap())
    }

    /// Commits `width` prefill rows. `real[s]` of them hold prompt tokens;
    /// the rest were written as masked padding by the forward pass.
    pub fn commit_prefill(&mut self, real: &[usize], width: usize) -> Result<(), CacheError> {
        if real.len() != self.shape.num_samples || real.iter().any(|&r| r > width) {
            return Err(CacheError::Contract("prefill lengths inconsistent with width".into()));
        }
        if width > self.inflight {
            return Err(CacheError::Contract(format!("prefill width {width} but only {} rows written", self.inflight)));
        }
        for (s, &r) in real.iter().enumerate() {
            self.logical_len[s] += r;
            self.ledger.prefill_useful += r as u64;
            self.ledger.prefill_padding += (width - r) as u64;
        }
        self.aligned_len += width;
        self.inflight = 0;
        Ok(())
    }
}

impl KvCache for AlignedGrid {
    fn shape(&self) -> CacheShape {
        self.shape
    }

    fn write_kv(&mut self, sample: usize, row: usize, layer: usize, k: &[f32], v: &[f32]) -> Result<(), CacheError> {
        if sample >= self.shape.num_samples {
            return Err(CacheError::SampleOutOfRange { sample, batch: self.shape.num_samples });
        }
        check_layer(&self.shape, layer)?;
        check_vec_len(&self.shape, k, v)?;
        if row >= self.shape.capacity {
            return Err(CacheError::Capacity { sample, row, capacity: self.shape.capacity });
        }
        if row < self.aligned_len || row > self.aligned_len + self.inflight {
            return Err(CacheError::Contract(format!(
                "write at row {row} outside in-flight window starting at {}",
                self.aligned_len
            )));
        }
        self.inflight = self.inflight.max(row - self.aligned_len + 1);
        let abs = self.abs(sample, row);
        self.store.store(layer, abs, k, v);
        self.visible[abs] = true;
        self.ledger.physical_writes += 1;
        Ok(())
    }

    fn mask_row(&mut self, sample: usize, row: usize) -> Result<(), CacheError> {
        if sample >= self.shape.num_samples || row >= self.aligned_len + self.inflight {
            return Err(CacheError::Contract(format!("mask of unwritten row {row}")));
        }
        let abs = self.abs(sample, row);
        self.visible[abs] = false;
        Ok(())
    }

    fn key(&self, sample: usize, row: usize, layer: usize) -> &[f32] {
        self.store.key(layer, self.abs(sample, row))
    }

    fn value(&self, sample: usize, row: usize, layer: usize) -> &[f32] {
        self.store.value(layer, self.abs(sample, row))
    }

    fn is_masked(&self, sample: usize, row: usize) -> bool {
        !self.visible[self.abs(sample, row)]
    }

    fn readable_len(&self, _sample: usize) -> usize {
        self.aligned_len + self.inflight
    }

    fn ledger(&self) -> &WriteLedger {
        &self.ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    fn shape(samples: usize, capacity: usize) -> CacheShape {
        CacheShape { num_layers: 2, kv_dim: 4, num_samples: samples, capacity }
    }

    fn vecs(seed: f32) -> (Vec<f32>, Vec<f32>) {
        ((0..4).map(|i| seed + i as f32).collect(), (0..4).map(|i| -seed - i as f32).collect())
    }

    fn write_rows<C: KvCache>(cache: &mut C, sample: usize, rows: std::ops::Range<usize>) {
        for row in rows {
            for layer in 0..2 {
                let (k, v) = vecs((sample * 1000 + row) as f32);
                cache.write_kv(sample, row, layer, &k, &v).unwrap();
            }
        }
    }

    #[test]
    fn write_then_read_back() {
        let mut arena = UnpadArena::new(shape(1, 8));
        let (k, v) = vecs(3.5);
        arena.write_kv(0, 0, 1, &k, &v).unwrap();
        assert_eq!(arena.key(0, 0, 1), &k[..]);
        assert_eq!(arena.value(0, 0, 1), &v[..]);
    }

    #[test]
    fn write_beyond_capacity_fails() {
        let mut arena = UnpadArena::new(shape(1, 2));
        write_rows(&mut arena, 0, 0..2);
        let (k, v) = vecs(0.0);
        assert!(matches!(arena.write_kv(0, 2, 0, &k, &v), Err(CacheError::Capacity { .. })));
        let mut grid = AlignedGrid::new(shape(1, 2));
        write_rows(&mut grid, 0, 0..2);
        assert!(matches!(grid.write_kv(0, 2, 0, &k, &v), Err(CacheError::Capacity { .. })));
    }

    #[test]
    fn interleaved_writes_land_in_disjoint_extents() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut arena = UnpadArena::new(shape(2, 256));
        let mut shadow: HashMap<(usize, usize, usize), Vec<f32>> = HashMap::new();
        for _ in 0..30 {
            let taus = [rng.random_range(1..=4usize), rng.random_range(1..=4usize)];
            for step_row in 0..5 {
                for s in 0..2 {
                    let row = arena.committed_len(s) + step_row;
                    for layer in 0..2 {
                        let k: Vec<f32> = (0..4).map(|_| rng.random()).collect();
                        arena.write_kv(s, row, layer, &k, &k).unwrap();
                        shadow.insert((s, row, layer), k);
                    }
                }
            }
            arena.commit_step(&taus).unwrap();
        }
        for (&(s, row, layer), k) in &shadow {
            if row < arena.committed_len(s) {
                assert_eq!(arena.key(s, row, layer), &k[..]);
            }
        }
        assert_eq!(arena.start_offset(1) - arena.start_offset(0), 256);
    }

    #[test]
    fn unpad_commit_advances_by_each_tau() {
        let mut arena = UnpadArena::new(shape(2, 32));
        write_rows(&mut arena, 0, 0..6);
        write_rows(&mut arena, 1, 0..3);
        arena.commit_step(&[4, 1]).unwrap();
        assert_eq!(arena.committed_len(0), 4);
        assert_eq!(arena.committed_len(1), 1);
        assert_eq!(arena.ledger().total_padding(), 0);
        assert_eq!(arena.ledger().padding_ratio().unwrap(), 0.0);
    }

    #[test]
    fn unpad_tau_out_of_range() {
        let mut arena = UnpadArena::new(shape(1, 8));
        write_rows(&mut arena, 0, 0..2);
        assert!(arena.commit_accepted(0, 3).is_err());
        assert!(arena.commit_accepted(0, 0).is_err());
        arena.commit_accepted(0, 2).unwrap();
    }

    #[test]
    fn unit_tau_behaves_autoregressively() {
        let mut arena = UnpadArena::new(shape(1, 16));
        for step in 0..10 {
            write_rows(&mut arena, 0, step..step + 3);
            arena.commit_step(&[1]).unwrap();
            assert_eq!(arena.committed_len(0), step + 1);
        }
    }

    #[test]
    fn random_steps_sum_taus() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut arena = UnpadArena::new(shape(1, 1024));
        let mut running = 0;
        for _ in 0..100 {
            let written = rng.random_range(1..=8usize);
            let tau = rng.random_range(1..=written);
            write_rows(&mut arena, 0, running..running + written);
            arena.commit_accepted(0, tau).unwrap();
            running += tau;
            assert_eq!(arena.committed_len(0), running);
        }
    }

    #[test]
    fn committed_rows_are_immutable() {
        let mut arena = UnpadArena::new(shape(1, 8));
        write_rows(&mut arena, 0, 0..2);
        arena.commit_accepted(0, 2).unwrap();
        let (k, v) = vecs(0.0);
        assert!(arena.write_kv(0, 1, 0, &k, &v).is_err());
    }

    #[test]
    fn padded_commit_matches_case_table() {
        let mut grid = AlignedGrid::new(shape(2, 32));
        for s in 0..2 {
            write_rows(&mut grid, s, 0..6);
        }
        let step = grid.commit_padded(&[4, 1]).unwrap().clone();
        assert_eq!(step.tau_max, 4);
        assert_eq!(grid.ledger().padding, vec![0, 3]);
        assert_eq!(grid.aligned_len(), 4);
        assert_eq!(grid.logical_len(1), 1);
        for row in 1..4 {
            assert!(grid.is_masked(1, row));
        }
        for s in 0..2 {
            write_rows(&mut grid, s, 4..10);
        }
        grid.commit_padded(&[2, 6]).unwrap();
        assert_eq!(grid.ledger().padding, vec![4, 3]);
        assert_eq!(grid.aligned_len(), 10);
    }

    #[test]
    fn padded_equal_taus_have_no_padding() {
        let mut grid = AlignedGrid::new(shape(3, 16));
        for s in 0..3 {
            write_rows(&mut grid, s, 0..3);
        }
        grid.commit_padded(&[3, 3, 3]).unwrap();
        assert_eq!(grid.ledger().total_padding(), 0);
        assert!(grid.commit_padded(&[]).is_err());
    }

    #[test]
    fn padding_ratio_single_step() {
        let mut grid = AlignedGrid::new(shape(2, 16));
        for s in 0..2 {
            write_rows(&mut grid, s, 0..5);
        }
        assert_eq!(grid.ledger().padding_ratio(), Err(CacheError::NoSteps));
        grid.commit_padded(&[4, 1]).unwrap();
        assert!((grid.ledger().padding_ratio().unwrap() - 0.375).abs() < 1e-12);

        let mut solo = AlignedGrid::new(shape(1, 16));
        write_rows(&mut solo, 0, 0..5);
        solo.commit_padded(&[3]).unwrap();
        assert_eq!(solo.ledger().padding_ratio().unwrap(), 0.0);
    }

    #[test]
    fn unpad_rejects_padding() {
        let mut arena = UnpadArena::new(shape(1, 4));
        assert!(arena.mask_row(0, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn write_difference_equals_alignment_shortfall(
            steps in proptest::collection::vec(proptest::collection::vec(1usize..=6, 3), 1..20)
        ) {
            let mut grid = AlignedGrid::new(shape(3, 256));
            let mut arena = UnpadArena::new(shape(3, 256));
            let mut expected = 0u64;
            for taus in &steps {
                let tau_max = *taus.iter().max().unwrap();
                for (s, &tau) in taus.iter().enumerate() {
                    let base = grid.aligned_len();
                    write_rows(&mut grid, s, base..base + 6);
                    let c = arena.committed_len(s);
                    write_rows(&mut arena, s, c..c + tau);
                    expected += (tau_max - tau) as u64;
                }
                grid.commit_padded(taus).unwrap();
                arena.commit_step(taus).unwrap();
            }
            proptest::prop_assert_eq!(arena.ledger().total_padding(), 0);
            proptest::prop_assert_eq!(
                grid.ledger().total_writes() - arena.ledger().total_writes(),
                expected
            );
        }
    }
}
