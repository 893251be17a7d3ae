//! Design-space sweeps over interconnect x skewness x accuracy, the best
//! token-to-expert operating point, savings comparison, and the strategy
//! recommendation.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::LatencyBreakdown;
use crate::domain::{
    distribution_from_skewness, sample_trace, HardwareConfig, ModelConfig, WorkloadConfig,
};
use crate::error::{Error, Result};
use crate::errormodel::ErrorScenario;
use crate::estimation::{error_rate, mle_estimate};
use crate::pipeline::{simulate_layer, PredictorSpec, SimOptions, StrategyKind};
use crate::predictors::OverheadCurve;
use crate::presets;

/// A hardware configuration with a label for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedHardware {
    pub id: String,
    #[serde(flatten)]
    pub hw: HardwareConfig,
}

/// Where the distribution-only error rate comes from at each skewness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionError {
    /// The same error rate everywhere.
    Fixed(f64),
    /// Fit the MLE on `train_batches` synthetic batches of the workload and
    /// score it against `test_batches` held-out batches.
    Estimated {
        train_batches: usize,
        test_batches: usize,
        seed: u64,
    },
}

impl Default for DistributionError {
    fn default() -> Self {
        DistributionError::Estimated {
            train_batches: 32,
            test_batches: 8,
            seed: 0,
        }
    }
}

impl DistributionError {
    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            DistributionError::Estimated {
                train_batches,
                test_batches,
                ..
            } => DistributionError::Estimated {
                train_batches,
                test_batches,
                seed,
            },
            fixed => fixed,
        }
    }

    /// Error rate at skewness `s`, clamped to [0, 1].
    pub fn resolve(&self, model: &ModelConfig, workload: &WorkloadConfig, s: f64) -> Result<f64> {
        match *self {
            DistributionError::Fixed(e) => {
                if !(0.0..=1.0).contains(&e) {
                    return Err(Error::invalid(format!(
                        "distribution error must be in [0, 1], got {e}"
                    )));
                }
                Ok(e)
            }
            DistributionError::Estimated {
                train_batches,
                test_batches,
                seed,
            } => {
                if train_batches == 0 || test_batches == 0 {
                    return Err(Error::invalid(
                        "train_batches and test_batches must be >= 1",
                    ));
                }
                let truth = distribution_from_skewness(model.num_experts, s)?;
                let batches = |n: usize| WorkloadConfig {
                    batch_size: workload.batch_size * n,
                    seq_len: workload.seq_len,
                    skewness: None,
                };
                let train = sample_trace(&truth, &batches(train_batches), model.top_k, seed)?;
                let test = sample_trace(
                    &truth,
                    &batches(test_batches),
                    model.top_k,
                    seed ^ 0x9e37_79b9_7f4a_7c15,
                )?;
                let est = mle_estimate(&train)?.distribution()?;
                let held_out = mle_estimate(&test)?.distribution()?;
                Ok(error_rate(&est, &held_out)?.min(1.0))
            }
        }
    }
}

fn default_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub model: ModelConfig,
    /// Batch and sequence length; any skewness here is ignored.
    pub workload: WorkloadConfig,
    pub hardware: Vec<NamedHardware>,
    pub skewness: Vec<f64>,
    #[serde(default = "presets::default_accuracy_grid")]
    pub accuracies: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<OverheadCurve>,
    #[serde(default)]
    pub error_scenario: ErrorScenario,
    #[serde(default)]
    pub distribution_error: DistributionError,
    #[serde(default)]
    pub options: SimOptions,
}

/// One simulated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub hardware_id: String,
    pub link_bandwidth: f64,
    pub skewness: f64,
    pub strategy: StrategyKind,
    /// Token-to-expert accuracy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Distribution-only error rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    pub breakdown: LatencyBreakdown,
}

fn strategy_rank(kind: StrategyKind) -> u8 {
    match kind {
        StrategyKind::None => 0,
        StrategyKind::DistributionOnly => 1,
        StrategyKind::TokenToExpert => 2,
    }
}

/// Simulates every grid point. Points run in parallel; the output is sorted
/// by (hardware order, skewness, strategy, accuracy).
pub fn run_sweep(grid: &SweepGrid) -> Result<Vec<SweepRecord>> {
    if grid.hardware.is_empty() || grid.skewness.is_empty() || grid.strategies.is_empty() {
        return Err(Error::invalid("sweep grid has an empty axis"));
    }
    let wants_t2e = grid.strategies.contains(&StrategyKind::TokenToExpert);
    if wants_t2e && grid.accuracies.is_empty() {
        return Err(Error::invalid(
            "token_to_expert sweep needs at least one accuracy",
        ));
    }
    if wants_t2e && grid.curve.is_none() {
        log::warn!("no overhead curve given; skipping token_to_expert points");
    }

    let points: Vec<(usize, f64)> = (0..grid.hardware.len())
        .flat_map(|h| grid.skewness.iter().map(move |&s| (h, s)))
        .collect();

    let per_point: Vec<Vec<(usize, SweepRecord)>> = points
        .par_iter()
        .map(|&(h, s)| sweep_point(grid, h, s))
        .collect::<Result<_>>()?;

    let mut records: Vec<(usize, SweepRecord)> = per_point.into_iter().flatten().collect();
    records.sort_by(|(ha, a), (hb, b)| {
        ha.cmp(hb)
            .then(a.skewness.total_cmp(&b.skewness))
            .then(strategy_rank(a.strategy).cmp(&strategy_rank(b.strategy)))
            .then(
                a.accuracy
                    .unwrap_or(0.0)
                    .total_cmp(&b.accuracy.unwrap_or(0.0)),
            )
    });
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

fn sweep_point(grid: &SweepGrid, h: usize, s: f64) -> Result<Vec<(usize, SweepRecord)>> {
    let named = &grid.hardware[h];
    let workload = WorkloadConfig {
        skewness: Some(s),
        ..grid.workload.clone()
    };
    let record = |strategy: PredictorSpec| -> Result<(usize, SweepRecord)> {
        let spec = strategy.with_scenario(grid.error_scenario);
        let breakdown = simulate_layer(
            &spec,
            &grid.model,
            &workload,
            &named.hw,
            grid.curve.as_ref(),
            &grid.options,
        )?;
        Ok((
            h,
            SweepRecord {
                hardware_id: named.id.clone(),
                link_bandwidth: named.hw.link_bandwidth,
                skewness: s,
                strategy: spec.kind,
                accuracy: spec.accuracy,
                error_rate: spec.error_rate,
                breakdown,
            },
        ))
    };

    let mut out = Vec::new();
    for &kind in &grid.strategies {
        match kind {
            StrategyKind::None => out.push(record(PredictorSpec::none())?),
            StrategyKind::DistributionOnly => {
                let eps = grid.distribution_error.resolve(&grid.model, &workload, s)?;
                out.push(record(PredictorSpec::distribution_only(eps))?);
            }
            StrategyKind::TokenToExpert if grid.curve.is_some() => {
                for &a in &grid.accuracies {
                    out.push(record(PredictorSpec::token_to_expert(a))?);
                }
            }
            StrategyKind::TokenToExpert => {}
        }
    }
    Ok(out)
}

/// Lowest-latency token-to-expert record; ties go to the lower accuracy.
pub fn best_token_to_expert<'a, I>(records: I) -> Option<&'a SweepRecord>
where
    I: IntoIterator<Item = &'a SweepRecord>,
{
    records
        .into_iter()
        .filter(|r| r.strategy == StrategyKind::TokenToExpert)
        .min_by(|a, b| {
            a.breakdown.total.total_cmp(&b.breakdown.total).then(
                a.accuracy
                    .unwrap_or(0.0)
                    .total_cmp(&b.accuracy.unwrap_or(0.0)),
            )
        })
}

/// Distribution-only saving minus token-to-expert saving, both measured
/// against the no-prediction baseline. Positive means distribution-only wins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsDifference {
    pub seconds: f64,
    /// `seconds` over the baseline total.
    pub fraction: f64,
}

pub fn savings_difference(
    baseline: f64,
    distribution_only: f64,
    token_to_expert: f64,
) -> SavingsDifference {
    let seconds = (baseline - distribution_only) - (baseline - token_to_expert);
    SavingsDifference {
        seconds,
        fraction: seconds / baseline,
    }
}

/// Per-(hardware, skewness) savings difference over a sweep's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub hardware_id: String,
    pub link_bandwidth: f64,
    pub skewness: f64,
    pub best_accuracy: f64,
    pub difference: SavingsDifference,
}

pub fn savings_table(records: &[SweepRecord]) -> Vec<SavingsRow> {
    let mut rows = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let key = (&records[i].hardware_id, records[i].skewness);
        let mut j = i;
        while j < records.len() && (&records[j].hardware_id, records[j].skewness) == key {
            j += 1;
        }
        let group = &records[i..j];
        let find = |k| group.iter().find(|r| r.strategy == k);
        if let (Some(base), Some(dist), Some(t2e)) = (
            find(StrategyKind::None),
            find(StrategyKind::DistributionOnly),
            best_token_to_expert(group),
        ) {
            rows.push(SavingsRow {
                hardware_id: base.hardware_id.clone(),
                link_bandwidth: base.link_bandwidth,
                skewness: base.skewness,
                best_accuracy: t2e.accuracy.unwrap_or(1.0),
                difference: savings_difference(
                    base.breakdown.total,
                    dist.breakdown.total,
                    t2e.breakdown.total,
                ),
            });
        }
        i = j;
    }
    rows
}

pub const CSV_HEADER: [&str; 13] = [
    "hardware_id",
    "link_bandwidth",
    "skewness",
    "strategy",
    "accuracy",
    "attention_s",
    "allreduce_s",
    "scatter_s",
    "ffn_s",
    "gather_s",
    "overhead_s",
    "residual_s",
    "total_s",
];

pub fn write_csv<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let b = &r.breakdown;
        w.write_record([
            r.hardware_id.clone(),
            r.link_bandwidth.to_string(),
            r.skewness.to_string(),
            r.strategy.as_str().to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            b.attention.to_string(),
            b.allreduce.to_string(),
            b.scatter.to_string(),
            b.ffn.to_string(),
            b.gather.to_string(),
            b.prediction_overhead.to_string(),
            b.placement_residual.to_string(),
            b.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs for a single-point recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendConfig {
    pub model: ModelConfig,
    /// Must carry the skewness to evaluate.
    pub workload: WorkloadConfig,
    pub hardware: HardwareConfig,
    #[serde(default = "presets::default_accuracy_grid")]
    pub accuracies: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<OverheadCurve>,
    #[serde(default)]
    pub error_scenario: ErrorScenario,
    #[serde(default)]
    pub distribution_error: DistributionError,
    #[serde(default)]
    pub options: SimOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub strategy: StrategyKind,
    /// Accuracy of the chosen token-to-expert operating point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub total_s: f64,
    pub skewness: f64,
    pub distribution_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub savings_difference: Option<SavingsDifference>,
    pub baseline: LatencyBreakdown,
    pub distribution_only: LatencyBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_token_to_expert: Option<LatencyBreakdown>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Picks the strategy with the lowest simulated latency at one point. Ties
/// prefer the simpler strategy.
pub fn recommend(config: &RecommendConfig) -> Result<Recommendation> {
    let skew = config.workload.require_skewness()?;
    let mut warnings = Vec::new();
    if config.curve.is_none() {
        warnings.push("no overhead curve; token_to_expert was not considered".to_string());
    }
    if let Some(c) = &config.curve {
        warnings.extend(c.monotonicity_warnings());
    }
    let grid = SweepGrid {
        model: config.model.clone(),
        workload: config.workload.clone(),
        hardware: vec![NamedHardware {
            id: "target".into(),
            hw: config.hardware.clone(),
        }],
        skewness: vec![skew],
        accuracies: config.accuracies.clone(),
        strategies: default_strategies(),
        curve: config.curve.clone(),
        error_scenario: config.error_scenario,
        distribution_error: config.distribution_error,
        options: config.options,
    };
    let records = run_sweep(&grid)?;
    let find = |k| {
        records
            .iter()
            .find(|r| r.strategy == k)
            .expect("strategy simulated")
    };
    let base = find(StrategyKind::None);
    let dist = find(StrategyKind::DistributionOnly);
    let t2e = best_token_to_expert(&records);

    let mut best = base;
    for cand in [Some(dist), t2e].into_iter().flatten() {
        if cand.breakdown.total.total_cmp(&best.breakdown.total) == Ordering::Less {
            best = cand;
        }
    }

    Ok(Recommendation {
        strategy: best.strategy,
        accuracy: best.accuracy,
        total_s: best.breakdown.total,
        skewness: skew,
        distribution_error: dist.error_rate.unwrap_or(0.0),
        savings_difference: t2e.map(|t| {
            savings_difference(
                base.breakdown.total,
                dist.breakdown.total,
                t.breakdown.total,
            )
        }),
        baseline: base.breakdown,
        distribution_only: dist.breakdown,
        best_token_to_expert: t2e.map(|t| t.breakdown),
        warnings,
    })
}
