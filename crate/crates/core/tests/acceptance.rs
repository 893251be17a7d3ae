//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moe_gps::costmodel::{
    attention_time, expert_transfer_time, scatter_fraction, ExpertAccounting,
};
use moe_gps::domain::{
    distribution_from_skewness, sample_trace, skewness_of_counts, ExpertTrace, TraceLayer,
    WorkloadConfig,
};
use moe_gps::duplication::{balance_by_duplication, verify_balance, Placement};
use moe_gps::errormodel::{bottleneck_tokens, ErrorScenario};
use moe_gps::estimation::{error_rate, mle_estimate};
use moe_gps::pipeline::StrategyKind;
use moe_gps::pipeline::{placement_residual, simulate_layer, PredictorSpec, SimOptions};
use moe_gps::predictors::{
    evaluate_accuracy, fit_conditional_model, fit_probability_model, ConditionKey,
};
use moe_gps::presets::*;
use moe_gps::sweep::{run_sweep, savings_table, DistributionError, NamedHardware, SweepGrid};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:?}, limit {limit:?}"))
    }
}

fn c1_skewness() -> Outcome {
    let start = Instant::now();
    let s = skewness_of_counts(&[75, 25, 0, 0]).map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_millis(1))?;
    check(s == 3.0, format!("skewness {s}"))
}

fn c2_scatter_fraction() -> Outcome {
    let oracle = |g: f64, s: f64| (g - 1.0) * s / (g * g);
    let f1 = scatter_fraction(4, 1.0);
    let f3 = scatter_fraction(4, 3.0);
    let ok = (f1 - 0.1875).abs() < 1e-12
        && (f3 - 0.5625).abs() < 1e-12
        && (f1 - oracle(4.0, 1.0)).abs() < 1e-12
        && (f3 - oracle(4.0, 3.0)).abs() < 1e-12;
    check(ok, format!("s=1 -> {f1}, s=3 -> {f3}"))
}

fn layer_from(rows: Vec<Vec<u32>>) -> TraceLayer {
    TraceLayer::from_experts(rows)
}

fn c3_duplication() -> Outcome {
    let start = Instant::now();

    // Experts 0 and 1 live on GPU 0 and 1. Six tokens go to expert 0, two to
    // expert 1.
    let hand = layer_from(vec![
        vec![0],
        vec![0],
        vec![0],
        vec![0],
        vec![0],
        vec![0],
        vec![1],
        vec![1],
    ]);
    let placement = Placement::new(4, 4, &[(0, 0), (1, 1), (2, 2), (3, 3)], None, 4)
        .map_err(|e| e.to_string())?;
    let out = balance_by_duplication(&hand, &placement).map_err(|e| e.to_string())?;
    let hosts: Vec<usize> = out.placement.hosts(0).iter().copied().collect();
    if out.dispatch.loads != [2, 2, 2, 2] || hosts != [0, 2, 3] {
        return Err(format!(
            "hand trace: loads {:?}, expert 0 on {hosts:?}",
            out.dispatch.loads
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let g = rng.gen_range(1..=8);
        let e = rng.gen_range(g..=2 * g + 4);
        let t = rng.gen_range(1..=1000);
        let hot = rng.gen_range(0..e as u32);
        let bias: f64 = rng.gen();
        let rows: Vec<Vec<u32>> = (0..t)
            .map(|_| {
                if rng.gen::<f64>() < bias {
                    vec![hot]
                } else {
                    vec![rng.gen_range(0..e as u32)]
                }
            })
            .collect();
        let layer = layer_from(rows);
        let placement = Placement::round_robin(e, g).map_err(|e| e.to_string())?;
        let out = balance_by_duplication(&layer, &placement).map_err(|e| e.to_string())?;
        let report = verify_balance(&layer, &out.placement, &out.dispatch);
        if !(out.complete && report.is_balanced()) {
            return Err(format!("instance {i} (G={g}, E={e}, T={t}): {report:?}"));
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "hand trace ok, 200 random instances balanced in {:?}",
        start.elapsed()
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c4_mle_consistency() -> Outcome {
    let start = Instant::now();
    let truth = distribution_from_skewness(8, 2.0).map_err(|e| e.to_string())?;
    let mut medians = Vec::new();
    for n in [100, 1_000, 10_000, 100_000] {
        let w = WorkloadConfig {
            batch_size: 1,
            seq_len: n,
            skewness: None,
        };
        let errs = (0..20)
            .map(|seed| {
                let trace = sample_trace(&truth, &w, 1, seed)?;
                error_rate(&mle_estimate(&trace)?.distribution()?, &truth)
            })
            .collect::<moe_gps::Result<Vec<f64>>>()
            .map_err(|e| e.to_string())?;
        medians.push(median(errs));
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let detail = format!(
        "medians {:?} in {elapsed:?}",
        medians
            .iter()
            .map(|m| format!("{:.3}%", m * 100.0))
            .collect::<Vec<_>>()
    );
    check(decreasing && medians[3] < 0.02, detail)
}

fn c5_error_envelope() -> Outcome {
    for i in 0..=100 {
        let eps = i as f64 / 100.0;
        let o = bottleneck_tokens(100.0, eps, ErrorScenario::Optimistic, 4);
        let t = bottleneck_tokens(100.0, eps, ErrorScenario::Typical, 4);
        let p = bottleneck_tokens(100.0, eps, ErrorScenario::Pessimistic, 4);
        if !(o <= t && t <= p) {
            return Err(format!("order broken at eps={eps}: {o} {t} {p}"));
        }
    }
    let t = bottleneck_tokens(100.0, 0.1, ErrorScenario::Typical, 4);
    let p = bottleneck_tokens(100.0, 0.1, ErrorScenario::Pessimistic, 4);
    check(
        (t - 110.0).abs() < 1e-12 && (p - 440.0).abs() < 1e-12,
        format!("typical {t}, pessimistic {p}"),
    )
}

/// Tokens from a small vocabulary; each word prefers one expert, with noise.
fn keyed_trace(seed: u64) -> ExpertTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 40;
    let prefs: Vec<u32> = (0..vocab).map(|_| rng.gen_range(0..8)).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for _ in 0..2000 {
        let word = rng.gen_range(0..vocab);
        let expert = if rng.gen::<f64>() < 0.7 {
            prefs[word]
        } else {
            rng.gen_range(0..8)
        };
        ids.push(word as u32);
        rows.push(vec![expert]);
    }
    let mut layer = TraceLayer::from_experts(rows);
    layer.positions = Some((0..ids.len() as u32).map(|t| t % 128).collect());
    layer.token_ids = Some(ids);
    ExpertTrace::new(8, vec![layer]).unwrap()
}

fn c6_predictor_ordering() -> Outcome {
    let run = || -> moe_gps::Result<String> {
        let mut worst = f64::INFINITY;
        for seed in 0..20 {
            let t = keyed_trace(seed);
            let prob = evaluate_accuracy(&fit_probability_model(&t), &t)?;
            for key in [ConditionKey::TokenId, ConditionKey::Position] {
                let cond = evaluate_accuracy(&fit_conditional_model(&t, key)?, &t)?;
                if cond < prob {
                    return Ok(format!("FAIL seed {seed} {key:?}: {cond} < {prob}"));
                }
                worst = worst.min(cond - prob);
            }
        }
        // Token A always goes to expert 1, token B to expert 2.
        let mut toy = TraceLayer::from_experts(vec![vec![1], vec![2], vec![1], vec![2], vec![1]]);
        toy.token_ids = Some(vec![0, 1, 0, 1, 0]);
        let toy = ExpertTrace::new(4, vec![toy])?;
        let acc = evaluate_accuracy(&fit_conditional_model(&toy, ConditionKey::TokenId)?, &toy)?;
        if acc != 1.0 {
            return Ok(format!("FAIL toy accuracy {acc}"));
        }
        Ok(format!(
            "20 seeds, min margin {worst:.4}; toy accuracy {acc}"
        ))
    };
    let msg = run().map_err(|e| e.to_string())?;
    check(!msg.starts_with("FAIL"), msg)
}

fn c7_u_shape() -> Outcome {
    let mut w = reference_workload();
    w.skewness = Some(1.4);
    let curve = reference_curve();
    let grid = default_accuracy_grid();
    let totals = grid
        .iter()
        .map(|&a| {
            simulate_layer(
                &PredictorSpec::token_to_expert(a),
                &mixtral_8x7b(),
                &w,
                &a100_nvlink(),
                Some(&curve),
                &SimOptions::default(),
            )
            .map(|b| b.total)
        })
        .collect::<moe_gps::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?;
    let (argmin, min) = totals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, &t)| (i, t))
        .unwrap();
    check(
        argmin != 0 && argmin != grid.len() - 1,
        format!("minimum {:.4e} s at accuracy {}", min, grid[argmin]),
    )
}

fn c8_sign_pattern() -> Outcome {
    let grid = SweepGrid {
        model: mixtral_8x7b(),
        workload: reference_workload(),
        hardware: vec![
            NamedHardware {
                id: "nvlink".into(),
                hw: a100_with_link(2e12),
            },
            NamedHardware {
                id: "pcie".into(),
                hw: a100_with_link(32e9),
            },
        ],
        skewness: vec![1.0, 1.4, 2.0, 2.6, 3.0, 4.0],
        accuracies: default_accuracy_grid(),
        strategies: StrategyKind::ALL.to_vec(),
        curve: Some(reference_curve()),
        error_scenario: ErrorScenario::Typical,
        distribution_error: DistributionError::default(),
        options: SimOptions::default(),
    };
    let rows = savings_table(&run_sweep(&grid).map_err(|e| e.to_string())?);
    let mut bad = Vec::new();
    let mut checked = 0;
    for r in &rows {
        let expect_positive = match (r.hardware_id.as_str(), r.skewness) {
            ("nvlink", s) if s <= 2.0 => Some(true),
            ("pcie", s) if s >= 2.6 => Some(false),
            _ => None,
        };
        if let Some(pos) = expect_positive {
            checked += 1;
            let d = r.difference.seconds;
            if (pos && d <= 0.0) || (!pos && d >= 0.0) {
                bad.push(format!("{} s={}: {:.3e}", r.hardware_id, r.skewness, d));
            }
        }
    }
    check(
        bad.is_empty() && checked == 6,
        if bad.is_empty() {
            format!("{checked} points with expected sign")
        } else {
            bad.join("; ")
        },
    )
}

fn c9_transfer() -> Outcome {
    let m = mixtral_8x7b();
    let t = expert_transfer_time(&m, &a100_nvlink(), 1, ExpertAccounting::TwoMatrix);
    let rel = (t - 1.17e-4).abs() / 1.17e-4;
    let pcie = a100_pcie();
    let w = WorkloadConfig {
        batch_size: 16,
        seq_len: 2048,
        skewness: Some(1.4),
    };
    let attn = attention_time(&m, &w, &pcie);
    let mut residuals = Vec::new();
    for acc in [ExpertAccounting::TwoMatrix, ExpertAccounting::Full] {
        let opts = SimOptions {
            expert_accounting: acc,
            ..SimOptions::default()
        };
        residuals.push(placement_residual(&m, &pcie, attn, &opts));
    }
    check(
        rel <= 0.2 && residuals.iter().all(|&r| r <= 0.0),
        format!(
            "transfer {t:.4e} s ({:.1}% off), PCIe residuals {residuals:?}",
            rel * 100.0
        ),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_moe-gps")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Runs every workflow into `dir` and returns the produced files.
fn run_workflows(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let cfg = configs();
    let trace = dir.join("trace.jsonl");
    let p = |s: &Path| s.to_string_lossy().into_owned();
    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "trace.jsonl",
            vec![
                "gen-trace".into(),
                "--experts".into(),
                "8".into(),
                "--skew".into(),
                "2".into(),
                "--tokens".into(),
                "512".into(),
                "--top-k".into(),
                "2".into(),
                "--layers".into(),
                "2".into(),
                "--seed".into(),
                "7".into(),
            ],
        ),
        (
            "stats.json",
            vec!["trace-stats".into(), "--trace".into(), p(&trace)],
        ),
        (
            "estimate.json",
            vec![
                "estimate".into(),
                "--trace".into(),
                p(&trace),
                "--truth-skew".into(),
                "2".into(),
            ],
        ),
        (
            "duplicate.json",
            vec![
                "duplicate".into(),
                "--trace".into(),
                p(&trace),
                "--layer".into(),
                "1".into(),
            ],
        ),
        (
            "simulate.json",
            vec![
                "simulate".into(),
                "--config".into(),
                p(&cfg.join("mixtral_nvlink.json")),
            ],
        ),
        (
            "simulate.csv",
            vec![
                "simulate".into(),
                "--config".into(),
                p(&cfg.join("mixtral_pcie.json")),
                "--format".into(),
                "csv".into(),
            ],
        ),
        (
            "sweep.json",
            vec![
                "sweep".into(),
                "--config".into(),
                p(&cfg.join("reference_sweep.json")),
                "--seed".into(),
                "3".into(),
            ],
        ),
        (
            "sweep.csv",
            vec![
                "sweep".into(),
                "--config".into(),
                p(&cfg.join("reference_sweep.json")),
                "--format".into(),
                "csv".into(),
            ],
        ),
        (
            "recommend.json",
            vec![
                "recommend".into(),
                "--config".into(),
                p(&cfg.join("mixtral_nvlink.json")),
            ],
        ),
    ];
    let mut files = Vec::new();
    for (name, args) in runs {
        let out = dir.join(name);
        let status = Command::new(bin())
            .args(&args)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("{name}: exit {status}"));
        }
        files.push((
            name.to_string(),
            std::fs::read(&out).map_err(|e| e.to_string())?,
        ));
    }
    Ok(files)
}

fn c10_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_workflows(a.path())?;
    let second = run_workflows(b.path())?;
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} outputs byte-identical", first.len())
        } else {
            format!("differ: {differing:?}")
        },
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("skewness exactness", c1_skewness),
        ("communication fraction exactness", c2_scatter_fraction),
        ("duplication oracle", c3_duplication),
        ("MLE consistency", c4_mle_consistency),
        ("error-model envelope", c5_error_envelope),
        ("predictor ordering", c6_predictor_ordering),
        ("U-shape at NVLink, s=1.4", c7_u_shape),
        ("savings sign pattern", c8_sign_pattern),
        ("expert-transfer arithmetic", c9_transfer),
        ("CLI determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
