//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{draft, prompts, target, CORPUS};
use emsd::engine::{decode_speculative, decode_with_accuracy, DecodeOptions, DecodeOutput, SampleStep};
use emsd::model::reference::full_forward;
use emsd::padding::{expected_tau, expected_tau_max, pmf_tau, pmf_tau_max, simulate, PaddingModel};
use emsd::predictors::{OraclePredictor, ScriptedStep};
use emsd::ragged::{concatenate_inputs, restore_indices};
use emsd::{decode, EngineConfig, Mode, Model, ModelConfig, PredictorKind, UnpadArena};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("{what} took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn lossless() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let combos = 24;
    for i in 0..combos {
        let seed: u64 = rng.random_range(0..1000);
        let offset = rng.random_range(0..CORPUS.len());
        let b = [1, 2, 4, 8][rng.random_range(0..4)];
        let predictor = if rng.random_bool(0.5) { PredictorKind::Draft } else { PredictorKind::Retrieval };
        let mode = if rng.random_bool(0.5) { Mode::Vanilla } else { Mode::Ems };
        let k = rng.random_range(1..=6);
        let ps = prompts(b, offset);
        let (t, d) = (target(seed), draft(seed));
        let config =
            |mode| EngineConfig { mode, predictor, k, batch_size: b, max_new_tokens: 32, ..Default::default() };
        let greedy = decode(&config(Mode::Greedy), &t, Some(&d), &ps).map_err(|e| e.to_string())?;
        let spec = decode(&config(mode), &t, Some(&d), &ps).map_err(|e| e.to_string())?;
        if spec.outputs != greedy.outputs {
            return Err(format!(
                "combo {i} (seed {seed}, offset {offset}, {predictor:?}, {mode:?}, b={b}, k={k}) diverged from greedy"
            ));
        }
    }
    within(start.elapsed(), Duration::from_secs(120), "lossless sweep")?;
    Ok(format!("{combos} combinations token-identical to greedy in {:.1?}", start.elapsed()))
}

fn two_sample_trace() -> Outcome {
    let model = target(0);
    let ps = prompts(2, 0);
    let script = || {
        vec![
            vec![ScriptedStep { predict: 5, correct: 3 }, ScriptedStep { predict: 2, correct: 1 }],
            vec![ScriptedStep { predict: 2, correct: 0 }, ScriptedStep { predict: 5, correct: 5 }],
        ]
    };
    let opts = DecodeOptions { max_new_tokens: 8, stop_on_eos: false };
    let run = |mode| {
        let mut oracle = OraclePredictor::scripted(&model, script());
        decode_speculative(&model, &ps, mode, &mut oracle, opts).map_err(|e| e.to_string())
    };
    let (v, e) = (run(Mode::Vanilla)?, run(Mode::Ems)?);
    let field = |out: &DecodeOutput, f: fn(&SampleStep) -> usize| -> Vec<Vec<usize>> {
        out.records.iter().take(2).map(|r| r.samples.iter().map(f).collect()).collect()
    };
    let got = (
        field(&v, |s| s.predicted),
        field(&v, |s| s.tau),
        field(&v, |s| s.input_padding),
        field(&v, |s| s.kv_padding),
        field(&e, |s| s.input_padding + s.kv_padding),
    );
    let want = (
        vec![vec![5, 2], vec![2, 5]],
        vec![vec![4, 1], vec![2, 6]],
        vec![vec![0, 3], vec![3, 0]],
        vec![vec![0, 3], vec![4, 0]],
        vec![vec![0, 0], vec![0, 0]],
    );
    check(
        got == want && v.outputs == e.outputs,
        "vanilla input pads (0,3),(3,0), KV pads (0,3),(4,0); EMS pads zero".into(),
        format!("got {got:?}"),
    )
}

fn write_identity() -> Outcome {
    let mut runs = 0;
    for seed in 0..3u64 {
        let t = target(seed);
        let d = draft(seed);
        for b in [2, 4, 8] {
            let ps = prompts(b, seed as usize);
            let mut pairs = Vec::new();
            for predictor in [PredictorKind::Draft, PredictorKind::Retrieval] {
                let config =
                    |mode| EngineConfig { mode, predictor, batch_size: b, max_new_tokens: 32, ..Default::default() };
                let v = decode(&config(Mode::Vanilla), &t, Some(&d), &ps).map_err(|e| e.to_string())?;
                let e = decode(&config(Mode::Ems), &t, Some(&d), &ps).map_err(|e| e.to_string())?;
                pairs.push((v, e));
            }
            let opts = DecodeOptions { max_new_tokens: 32, stop_on_eos: true };
            let v = decode_with_accuracy(&t, &ps, Mode::Vanilla, 0.6, 7, seed, opts).map_err(|e| e.to_string())?;
            let e = decode_with_accuracy(&t, &ps, Mode::Ems, 0.6, 7, seed, opts).map_err(|e| e.to_string())?;
            pairs.push((v, e));
            for (v, e) in pairs {
                let deficit: u64 =
                    v.records.iter().flat_map(|r| r.samples.iter().map(move |s| (r.tau_max - s.tau) as u64)).sum();
                let lv = v.ledger.as_ref().expect("speculative runs keep a ledger");
                let le = e.ledger.as_ref().expect("speculative runs keep a ledger");
                let diff = lv.total_writes() as i64 - le.total_writes() as i64;
                if diff != deficit as i64 {
                    return Err(format!("seed {seed} b={b}: write difference {diff} != {deficit}"));
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} vanilla/EMS run pairs satisfy the write identity exactly"))
}

fn pmf_exactness() -> Outcome {
    for p in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
        for cap in [1, 2, 8, 32] {
            let single = PaddingModel::new(p, 1, cap).map_err(|e| e.to_string())?;
            if pmf_tau_max(&single) != pmf_tau(&single) {
                return Err(format!("pmf_tau_max(b=1) != pmf_tau at p={p} cap={cap}"));
            }
            for b in [1, 2, 4, 16, 64] {
                let m = PaddingModel::new(p, b, cap).map_err(|e| e.to_string())?;
                for pmf in [pmf_tau(&m), pmf_tau_max(&m)] {
                    let sum: f64 = pmf.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(format!("pmf sums to {sum} at p={p} b={b} cap={cap}"));
                    }
                }
            }
        }
    }
    for p in [0.1, 0.5, 0.9] {
        let m = PaddingModel::new(p, 1, 400).map_err(|e| e.to_string())?;
        let err = (expected_tau(&m) - 1.0 / (1.0 - p)).abs();
        if err > 1e-6 {
            return Err(format!("E[tau] off by {err} at p={p}"));
        }
    }
    Ok("b=1 identity exact, sums within 1e-12, E[tau] within 1e-6 of 1/(1-p)".into())
}

fn monte_carlo() -> Outcome {
    let start = Instant::now();
    let m = PaddingModel::new(0.5, 4, 8).map_err(|e| e.to_string())?;
    let row = simulate(&m, 1_000_000, 7).map_err(|e| e.to_string())?;
    let exact = expected_tau_max(&m);
    let err = (row.e_tau_max - exact).abs();
    within(start.elapsed(), Duration::from_secs(30), "Monte-Carlo run")?;
    check(
        err <= 0.01,
        format!("MC {:.4} vs exact {exact:.4} in {:.1?}", row.e_tau_max, start.elapsed()),
        format!("MC {:.4} vs exact {exact:.4}", row.e_tau_max),
    )
}

fn overhead_claims() -> Outcome {
    let r = |p, b| -> Result<f64, String> {
        let m = PaddingModel::new(p, b, 8).map_err(|e| e.to_string())?;
        Ok(simulate(&m, 200_000, 11).map_err(|e| e.to_string())?.e_r_bar)
    };
    let (high, low) = (r(0.7, 16)?, r(0.9, 24)?);
    check(
        high > 0.5 && low >= 0.25,
        format!("E[r] = {high:.3} at (0.7, 16) and {low:.3} at (0.9, 24)"),
        format!("E[r] = {high:.3} at (0.7, 16), {low:.3} at (0.9, 24)"),
    )
}

fn linkage() -> Outcome {
    let (p, k, b, steps) = (0.6, 7, 4, 500);
    let model = Model::init(ModelConfig { max_positions: 2048, init_seed: 3, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let ps = prompts(b, 0);
    let opts = DecodeOptions { max_new_tokens: 1600, stop_on_eos: false };
    let out = decode_with_accuracy(&model, &ps, Mode::Ems, p, k, 42, opts).map_err(|e| e.to_string())?;
    // Only steps where every sample drafted the full k, so the budget never
    // shortened a draft.
    let taus: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.samples.iter().all(|s| s.active && s.predicted == k))
        .take(steps)
        .flat_map(|r| r.samples.iter().map(|s| s.tau as f64))
        .collect();
    if taus.len() < b * steps {
        return Err(format!("only {} full-draft sample steps", taus.len()));
    }
    let m = PaddingModel::new(p, 1, k + 1).map_err(|e| e.to_string())?;
    let mean = expected_tau(&m);
    let var: f64 = pmf_tau(&m).iter().enumerate().map(|(i, w)| w * ((i + 1) as f64 - mean).powi(2)).sum();
    let n = taus.len() as f64;
    let observed = taus.iter().sum::<f64>() / n;
    let se = (var / n).sqrt();
    let z = (observed - mean) / se;
    check(
        z.abs() <= 3.0,
        format!("mean tau {observed:.4} vs {mean:.4} over {n} sample steps ({z:+.2} SE)"),
        format!("mean tau {observed:.4} vs {mean:.4} ({z:+.2} SE)"),
    )
}

fn ragged_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let model = target(9);
    let vocab = model.config().vocab_size as u32;
    let mut worst = 0.0f32;
    for case in 0..100 {
        let b = rng.random_range(1..=6);
        let prefixes: Vec<Vec<u32>> =
            (0..b).map(|_| (0..rng.random_range(0..24)).map(|_| rng.random_range(0..vocab)).collect()).collect();
        let chunks: Vec<Vec<u32>> =
            (0..b).map(|_| (0..rng.random_range(0..9)).map(|_| rng.random_range(0..vocab)).collect()).collect();
        let mut arena = UnpadArena::new(model.cache_shape(b, model.config().max_positions));
        model.forward_ragged(&concatenate_inputs(&prefixes), &mut arena).map_err(|e| e.to_string())?;
        for (s, p) in prefixes.iter().enumerate() {
            arena.commit_prefill(s, p.len()).map_err(|e| e.to_string())?;
        }
        let logits = model.forward_ragged(&concatenate_inputs(&chunks), &mut arena).map_err(|e| e.to_string())?;
        let mut offset = 0;
        for s in 0..b {
            let full: Vec<u32> = prefixes[s].iter().chain(&chunks[s]).copied().collect();
            if full.is_empty() {
                continue;
            }
            let reference = full_forward(&model, &full).map_err(|e| e.to_string())?;
            for (j, row) in reference[prefixes[s].len()..].iter().enumerate() {
                for (a, r) in logits[offset + j].0.iter().zip(&row.0) {
                    worst = worst.max((a - r).abs());
                }
            }
            offset += chunks[s].len();
        }
        if worst > 1e-5 {
            return Err(format!("case {case}: logits differ by {worst:e}"));
        }
    }
    for list in 0..1000 {
        let counts: Vec<usize> = (0..rng.random_range(1..=12)).map(|_| rng.random_range(0..7)).collect();
        let brute: Vec<(usize, usize)> =
            counts.iter().enumerate().flat_map(|(s, &c)| (0..c).map(move |j| (s, j))).collect();
        for (i, &(s, j)) in brute.iter().enumerate() {
            let slot = restore_indices(&counts, i).map_err(|e| e.to_string())?;
            if (slot.original_batch_index, slot.original_sequence_position) != (s, j) {
                return Err(format!("list {list}: index {i} restored to {slot:?}, expected ({s}, {j})"));
            }
        }
        if restore_indices(&counts, brute.len()).is_ok() {
            return Err(format!("list {list}: index past the end accepted"));
        }
    }
    Ok(format!("100 ragged batches within {worst:.1e} of full recompute; 1000 index lists exact"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("losslessness", lossless),
        ("two-sample padding trace", two_sample_trace),
        ("write accounting identity", write_identity),
        ("acceptance-length PMF exactness", pmf_exactness),
        ("Monte-Carlo vs exact E[tau_max]", monte_carlo),
        ("padding overhead levels", overhead_claims),
        ("engine acceptance matches geometric model", linkage),
        ("ragged batch vs full recompute", ragged_oracle),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
