use serde::Serialize;

use crate::padding::step_stats;

/// One sample's share of a decode step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SampleStep {
    /// False once the sample hit its budget or EOS; it then only occupies
    /// its batch slot.
    pub active: bool,
    /// Number of drafted tokens `k_s`.
    pub predicted: usize,
    /// PAD tokens appended to this sample's input to match the longest one.
    pub input_padding: usize,
    /// Acceptance length; 0 for an idle sample.
    pub tau: usize,
    /// PAD slots written to the cache after verification.
    pub kv_padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub samples: Vec<SampleStep>,
    pub tau_max: usize,
    /// `tau_max` minus the batch-mean acceptance length (idle samples
    /// count as 0).
    pub delta_bar: f64,
    /// `delta_bar / tau_max`.
    pub r_bar: f64,
    /// Input tokens run through the model plus PAD slots written.
    pub processed_tokens: usize,
}

impl StepRecord {
    pub fn new(samples: Vec<SampleStep>, processed_tokens: usize) -> Self {
        let taus: Vec<usize> = samples.iter().map(|s| s.tau).collect();
        let stats = step_stats(&taus);
        Self { samples, tau_max: stats.tau_max, delta_bar: stats.delta_bar, r_bar: stats.r_bar, processed_tokens }
    }

    pub fn taus(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.tau).collect()
    }
}

/// Wall-clock measurements, kept apart from the deterministic counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub prefill_secs: f64,
    pub decode_secs: f64,
    /// Generated tokens per second of the decode loop alone.
    pub tps_incremental: f64,
    /// Generated tokens per second including prefill.
    pub tps_total: f64,
}

impl Timing {
    pub fn new(prefill_secs: f64, decode_secs: f64, generated: usize) -> Self {
        let rate = |secs: f64| if secs > 0.0 { generated as f64 / secs } else { 0.0 };
        Self {
            prefill_secs,
            decode_secs,
            tps_incremental: rate(decode_secs),
            tps_total: rate(prefill_secs + decode_secs),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub tokens_generated: Vec<usize>,
    pub decode_steps: usize,
    /// Mean acceptance length over active (sample, step) pairs.
    pub avg_acceptance_length: f64,
    /// Mean over steps of the per-step padding ratio.
    pub avg_padding_ratio: f64,
    pub input_padding: u64,
    pub kv_padding: u64,
    /// Slots committed with real tokens.
    pub useful_writes: u64,
    pub processed_tokens: u64,
    pub timing: Timing,
}

/// Aggregates step records. Counters are exact; averages are 0 when there
/// are no steps.
pub fn compute_metrics(records: &[StepRecord]) -> RunMetrics {
    let batch = records.first().map_or(0, |r| r.samples.len());
    let mut m = RunMetrics { tokens_generated: vec![0; batch], ..Default::default() };
    let mut tau_sum = 0usize;
    let mut tau_count = 0usize;
    let mut ratio_sum = 0.0;
    for r in records {
        for (s, step) in r.samples.iter().enumerate() {
            if step.active {
                tau_sum += step.tau;
                tau_count += 1;
            }
            if s < m.tokens_generated.len() {
                m.tokens_generated[s] += step.tau;
            }
            m.input_padding += step.input_padding as u64;
            m.kv_padding += step.kv_padding as u64;
            m.useful_writes += step.tau as u64;
        }
        ratio_sum += r.r_bar;
        m.processed_tokens += r.processed_tokens as u64;
    }
    m.decode_steps = records.len();
    if tau_count > 0 {
        m.avg_acceptance_length = tau_sum as f64 / tau_count as f64;
    }
    if !records.is_empty() {
        m.avg_padding_ratio = ratio_sum / records.len() as f64;
    }
    m
}
