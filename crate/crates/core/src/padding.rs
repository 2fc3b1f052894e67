//! Padding overhead under a geometric acceptance model.
//!
//! Each of `b` samples accepts `tau` tokens per step, where every draft is
//! right independently with probability `p`, truncated at `cap` (the draft
//! length plus one). Aligning the batch costs
//! `delta_bar = tau_max - mean(tau)` padding slots per sample and wastes the
//! fraction `r_bar = delta_bar / tau_max` of the step's slots.
//!
//! The PMFs of `tau` and `tau_max` are exact. `E[delta_bar]` and `E[r_bar]`
//! come from a seeded Monte-Carlo estimator whose result does not depend on
//! the number of threads.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PaddingError {
    #[error("p must lie in [0, 1), got {0}")]
    Accuracy(f64),
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("cap must be at least 1")]
    Cap,
    #[error("trials must be at least 1")]
    Trials,
    #[error("sweep grids must be nonempty")]
    EmptyGrid,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PaddingModel {
    pub p: f64,
    pub b: usize,
    pub cap: usize,
}

impl PaddingModel {
    pub fn new(p: f64, b: usize, cap: usize) -> Result<Self, PaddingError> {
        if !(0.0..1.0).contains(&p) {
            return Err(PaddingError::Accuracy(p));
        }
        if b == 0 {
            return Err(PaddingError::BatchSize);
        }
        if cap == 0 {
            return Err(PaddingError::Cap);
        }
        Ok(Self { p, b, cap })
    }

    /// `P(tau <= k)`.
    fn cdf(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else if k >= self.cap {
            1.0
        } else {
            1.0 - self.p.powi(k as i32)
        }
    }
}

/// `P(tau = k)` for `k = 1..=cap` (index `k - 1`). Geometric below the cap,
/// with the whole tail `p^(cap-1)` lumped at `cap`.
pub fn pmf_tau(model: &PaddingModel) -> Vec<f64> {
    let p = model.p;
    (1..=model.cap)
        .map(|k| if k < model.cap { p.powi(k as i32 - 1) * (1.0 - p) } else { p.powi(k as i32 - 1) })
        .collect()
}

/// `P(tau_max = k)` for `k = 1..=cap`, the maximum of `b` independent
/// draws.
///
/// Evaluates `F(k)^b - F(k-1)^b` in the factored form
/// `P(tau = k) * sum_{i<b} F(k)^i F(k-1)^(b-1-i)`, which avoids
/// cancellation and reduces to `pmf_tau` exactly when `b = 1`. At `k = 1`
/// this is `(1-p)^b`; at the cap it is `1 - (1 - p^(cap-1))^b`.
pub fn pmf_tau_max(model: &PaddingModel) -> Vec<f64> {
    let single = pmf_tau(model);
    let b = model.b;
    (1..=model.cap)
        .map(|k| {
            let hi = model.cdf(k);
            let lo = model.cdf(k - 1);
            let spread: f64 = (0..b).map(|i| hi.powi(i as i32) * lo.powi((b - 1 - i) as i32)).sum();
            single[k - 1] * spread
        })
        .collect()
}

/// `sum_k k * pmf[k - 1]`.
pub fn expectation(pmf: &[f64]) -> f64 {
    pmf.iter().enumerate().map(|(i, &m)| (i + 1) as f64 * m).sum()
}

pub fn expected_tau(model: &PaddingModel) -> f64 {
    expectation(&pmf_tau(model))
}

pub fn expected_tau_max(model: &PaddingModel) -> f64 {
    expectation(&pmf_tau_max(model))
}

/// Alignment cost of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub tau_max: usize,
    pub delta_bar: f64,
    pub r_bar: f64,
}

pub fn step_stats(taus: &[usize]) -> StepStats {
    let tau_max = taus.iter().copied().max().unwrap_or(0);
    if tau_max == 0 {
        return StepStats { tau_max, delta_bar: 0.0, r_bar: 0.0 };
    }
    let mean = taus.iter().sum::<usize>() as f64 / taus.len() as f64;
    let delta_bar = tau_max as f64 - mean;
    StepStats { tau_max, delta_bar, r_bar: delta_bar / tau_max as f64 }
}

/// Draws truncated-geometric acceptance lengths.
#[derive(Debug, Clone, Copy)]
pub struct TauSampler {
    failures: Geometric,
    cap: usize,
}

impl TauSampler {
    pub fn new(model: &PaddingModel) -> Self {
        // Each accepted draft is a "failure" before the first rejection.
        let failures = Geometric::new(1.0 - model.p).expect("1 - p lies in (0, 1]");
        Self { failures, cap: model.cap }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let extra = self.failures.sample(rng);
        (extra as usize).saturating_add(1).min(self.cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    Montecarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub b: usize,
    pub cap: usize,
    pub estimator: Estimator,
    pub trials: u64,
    #[serde(rename = "E_tau_max")]
    pub e_tau_max: f64,
    #[serde(rename = "E_delta_bar")]
    pub e_delta_bar: f64,
    #[serde(rename = "E_r_bar")]
    pub e_r_bar: f64,
}

const CHUNK: u64 = 8192;

#[derive(Default, Clone, Copy)]
struct Partial {
    tau_max: u64,
    delta_bar: f64,
    r_bar: f64,
}

/// Monte-Carlo estimate of `E[tau_max]`, `E[delta_bar]`, `E[r_bar]`.
///
/// Trials are split into fixed chunks of 8192; chunk `c` draws from
/// `ChaCha8Rng::seed_from_u64(seed)` on stream `c`. Chunk sums are combined
/// in chunk order, so the result is independent of scheduling.
pub fn simulate(model: &PaddingModel, trials: u64, seed: u64) -> Result<SweepRow, PaddingError> {
    if trials == 0 {
        return Err(PaddingError::Trials);
    }
    let sampler = TauSampler::new(model);
    let chunks = trials.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let n = CHUNK.min(trials - c * CHUNK);
            let mut taus = vec![0usize; model.b];
            let mut acc = Partial::default();
            for _ in 0..n {
                for t in taus.iter_mut() {
                    *t = sampler.sample(&mut rng);
                }
                let s = step_stats(&taus);
                acc.tau_max += s.tau_max as u64;
                acc.delta_bar += s.delta_bar;
                acc.r_bar += s.r_bar;
            }
            acc
        })
        .collect();
    let total = partials.iter().fold(Partial::default(), |a, p| Partial {
        tau_max: a.tau_max + p.tau_max,
        delta_bar: a.delta_bar + p.delta_bar,
        r_bar: a.r_bar + p.r_bar,
    });
    let n = trials as f64;
    Ok(SweepRow {
        p: model.p,
        b: model.b,
        cap: model.cap,
        estimator: Estimator::Montecarlo,
        trials,
        e_tau_max: total.tau_max as f64 / n,
        e_delta_bar: total.delta_bar / n,
        e_r_bar: total.r_bar / n,
    })
}

/// Default accuracy grid: 0.10 to 0.95 in steps of 0.05.
pub fn default_p_grid() -> Vec<f64> {
    (2..=19).map(|i| i as f64 * 0.05).collect()
}

pub fn default_b_grid() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32]
}

pub const DEFAULT_CAP: usize = 8;

/// One Monte-Carlo row per `(p, b)`, `p` varying slowest. Cell `i` uses
/// seed `seed + i`.
pub fn sweep(
    p_grid: &[f64],
    b_grid: &[usize],
    cap: usize,
    trials: u64,
    seed: u64,
) -> Result<Vec<SweepRow>, PaddingError> {
    if p_grid.is_empty() || b_grid.is_empty() {
        return Err(PaddingError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(p_grid.len() * b_grid.len());
    for (i, (&p, &b)) in p_grid.iter().flat_map(|p| b_grid.iter().map(move |b| (p, b))).enumerate() {
        let model = PaddingModel::new(p, b, cap)?;
        rows.push(simulate(&model, trials, seed.wrapping_add(i as u64))?);
    }
    Ok(rows)
}

/// CSV with header `p,b,cap,estimator,trials,E_tau_max,E_delta_bar,E_r_bar`.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), PaddingError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["p", "b", "cap", "estimator", "trials", "E_tau_max", "E_delta_bar", "E_r_bar"])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(p: f64, b: usize, cap: usize) -> PaddingModel {
        PaddingModel::new(p, b, cap).unwrap()
    }

    #[test]
    fn pmf_tau_examples() {
        assert_eq!(pmf_tau(&model(0.0, 1, 5)), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(pmf_tau(&model(0.5, 1, 3)), vec![0.5, 0.25, 0.25]);
        assert!((expected_tau(&model(0.5, 1, 200)) - 2.0).abs() < 1e-12);
        assert_eq!(pmf_tau(&model(0.3, 1, 1)), vec![1.0]);
    }

    #[test]
    fn invalid_models() {
        assert!(matches!(PaddingModel::new(1.0, 1, 8), Err(PaddingError::Accuracy(_))));
        assert!(PaddingModel::new(-0.1, 1, 8).is_err());
        assert!(PaddingModel::new(0.5, 0, 8).is_err());
        assert!(PaddingModel::new(0.5, 1, 0).is_err());
    }

    #[test]
    fn pmf_tau_max_examples() {
        let m = model(0.5, 2, 3);
        let pmf = pmf_tau_max(&m);
        assert!((pmf[0] - 0.25).abs() < 1e-15);
        assert!((pmf[1] - 0.3125).abs() < 1e-15);
        // cap: 1 - (1 - 0.25)^2
        assert!((pmf[2] - 0.4375).abs() < 1e-15);
        for &(p, cap) in &[(0.0, 4), (0.37, 8), (0.9, 12)] {
            let m = model(p, 1, cap);
            assert_eq!(pmf_tau_max(&m), pmf_tau(&m));
        }
    }

    #[test]
    fn direct_cdf_difference_agrees() {
        for &(p, b, cap) in &[(0.2, 3, 8), (0.7, 16, 8), (0.9, 24, 8), (0.5, 5, 20)] {
            let m = model(p, b, cap);
            let pmf = pmf_tau_max(&m);
            for k in 1..=cap {
                let direct = m.cdf(k).powi(b as i32) - m.cdf(k - 1).powi(b as i32);
                assert!((pmf[k - 1] - direct).abs() < 1e-12, "p={p} b={b} k={k}");
            }
        }
    }

    #[test]
    fn pmfs_sum_to_one() {
        for p in [0.0, 0.1, 0.5, 0.9, 0.99] {
            for b in [1, 2, 7, 32] {
                for cap in [1, 2, 8, 50] {
                    let m = model(p, b, cap);
                    assert!((pmf_tau(&m).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!((pmf_tau_max(&m).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_sample_has_no_padding() {
        for p in [0.1, 0.6, 0.95] {
            let row = simulate(&model(p, 1, 8), 20_000, 3).unwrap();
            assert_eq!(row.e_delta_bar, 0.0);
            assert_eq!(row.e_r_bar, 0.0);
        }
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let m = model(0.6, 5, 8);
        assert_eq!(simulate(&m, 50_000, 9).unwrap(), simulate(&m, 50_000, 9).unwrap());
        assert!(matches!(simulate(&m, 0, 9), Err(PaddingError::Trials)));
    }

    #[test]
    fn delta_bar_matches_linearity() {
        // E[delta_bar] = E[tau_max] - E[tau] by linearity of expectation.
        let m = model(0.6, 6, 8);
        let row = simulate(&m, 400_000, 17).unwrap();
        let exact = expected_tau_max(&m) - expected_tau(&m);
        assert!((row.e_delta_bar - exact).abs() < 0.01, "{} vs {exact}", row.e_delta_bar);
    }

    #[test]
    fn step_stats_examples() {
        let s = step_stats(&[4, 1]);
        assert_eq!(s.tau_max, 4);
        assert!((s.delta_bar - 1.5).abs() < 1e-15);
        assert!((s.r_bar - 0.375).abs() < 1e-15);
        assert_eq!(step_stats(&[3, 3]).r_bar, 0.0);
        assert_eq!(step_stats(&[]).tau_max, 0);
    }

    #[test]
    fn csv_layout() {
        let rows = sweep(&[0.5], &[1], 8, 1000, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].e_r_bar, 0.0);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "p,b,cap,estimator,trials,E_tau_max,E_delta_bar,E_r_bar");
        assert!(text.lines().nth(1).unwrap().starts_with("0.5,1,8,montecarlo,1000,"));
        assert!(sweep(&[], &[1], 8, 10, 0).is_err());
    }

    #[test]
    fn default_grid() {
        let g = default_p_grid();
        assert_eq!(g.len(), 18);
        assert!((g[0] - 0.1).abs() < 1e-12 && (g[17] - 0.95).abs() < 1e-12);
    }
}
