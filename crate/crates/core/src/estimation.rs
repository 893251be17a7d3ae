//! Distribution-only prediction: per-layer multinomial MLE of expert
//! selection probabilities, batch-wise updates, and the error-rate metric.

use serde::{Deserialize, Serialize};

use crate::domain::{ExpertTrace, TokenDistribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEstimate {
    /// `probs[l][i]`: estimated probability of expert `i` in layer `l`.
    pub probs: Vec<Vec<f64>>,
    /// Routed-assignment counts the estimate was built from.
    pub counts: Vec<Vec<u64>>,
}

impl DistributionEstimate {
    /// `p[i] = n[i] / sum(n)` for every layer.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let probs = counts
            .iter()
            .enumerate()
            .map(|(l, c)| {
                mle_layer(c).ok_or_else(|| Error::invalid(format!("layer {l} has no tokens")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { probs, counts })
    }

    pub fn distribution(&self) -> Result<TokenDistribution> {
        TokenDistribution::new(self.probs.clone())
    }

    pub fn num_layers(&self) -> usize {
        self.probs.len()
    }
}

fn mle_layer(counts: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&n| n as f64 / total as f64).collect())
}

fn trace_counts(trace: &ExpertTrace) -> Result<Vec<Vec<u64>>> {
    if trace.token_count() == 0 {
        return Err(Error::invalid("trace has no tokens"));
    }
    Ok((0..trace.num_layers()).map(|l| trace.counts(l)).collect())
}

pub fn mle_estimate(trace: &ExpertTrace) -> Result<DistributionEstimate> {
    DistributionEstimate::from_counts(trace_counts(trace)?)
}

/// MLE with `alpha` pseudo-counts added to every expert.
pub fn smoothed_estimate(trace: &ExpertTrace, alpha: f64) -> Result<DistributionEstimate> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "smoothing must be >= 0, got {alpha}"
        )));
    }
    let counts = trace_counts(trace)?;
    let probs = counts
        .iter()
        .map(|c| {
            let total = c.iter().sum::<u64>() as f64 + alpha * c.len() as f64;
            c.iter().map(|&n| (n as f64 + alpha) / total).collect()
        })
        .collect();
    Ok(DistributionEstimate { probs, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Pool all counts seen so far.
    Cumulative,
    /// Blend in the latest batch with weight `lambda`.
    Exponential(f64),
}

/// Folds one batch of per-layer counts into an existing estimate.
pub fn update_moving_average(
    prev: &DistributionEstimate,
    batch_counts: &[Vec<u64>],
    mode: UpdateMode,
) -> Result<DistributionEstimate> {
    if batch_counts.len() != prev.num_layers() {
        return Err(Error::invalid(format!(
            "batch has {} layers, estimate has {}",
            batch_counts.len(),
            prev.num_layers()
        )));
    }
    for (l, (b, c)) in batch_counts.iter().zip(&prev.counts).enumerate() {
        if b.len() != c.len() {
            return Err(Error::invalid(format!("layer {l}: expert count mismatch")));
        }
    }
    let pooled: Vec<Vec<u64>> = prev
        .counts
        .iter()
        .zip(batch_counts)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();

    match mode {
        UpdateMode::Cumulative => DistributionEstimate::from_counts(pooled),
        UpdateMode::Exponential(lambda) => {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(Error::invalid(format!(
                    "lambda must be in (0, 1], got {lambda}"
                )));
            }
            let probs = prev
                .probs
                .iter()
                .zip(batch_counts)
                .enumerate()
                .map(|(l, (old, batch))| {
                    let fresh = mle_layer(batch)
                        .ok_or_else(|| Error::invalid(format!("batch layer {l} has no tokens")))?;
                    let mixed: Vec<f64> = old
                        .iter()
                        .zip(&fresh)
                        .map(|(o, f)| (1.0 - lambda) * o + lambda * f)
                        .collect();
                    let sum: f64 = mixed.iter().sum();
                    Ok(mixed.into_iter().map(|p| p / sum).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DistributionEstimate {
                probs,
                counts: pooled,
            })
        }
    }
}

/// Mean absolute per-expert deviation normalized by `1/E`, averaged over
/// layers. A value of 0.02 is a 2% error rate.
pub fn error_rate(estimate: &TokenDistribution, truth: &TokenDistribution) -> Result<f64> {
    if estimate.num_layers() != truth.num_layers() || estimate.num_experts() != truth.num_experts()
    {
        return Err(Error::invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            estimate.num_layers(),
            estimate.num_experts(),
            truth.num_layers(),
            truth.num_experts()
        )));
    }
    let e = truth.num_experts() as f64;
    let per_layer = estimate.layers().iter().zip(truth.layers()).map(|(a, b)| {
        let mad = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / e;
        mad * e
    });
    Ok(per_layer.sum::<f64>() / truth.num_layers() as f64)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::domain::TraceLayer;
    use proptest::prelude::*;

    fn valid(probs: &[Vec<f64>]) -> bool {
        probs.iter().all(|p| {
            p.iter().all(|&x| (0.0..=1.0).contains(&x))
                && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
        })
    }

    fn trace(rows: &[u32], e: usize) -> ExpertTrace {
        let l = TraceLayer::from_experts(rows.iter().map(|&x| vec![x]).collect());
        ExpertTrace::new(e, vec![l]).unwrap()
    }

    proptest! {
        #[test]
        fn estimates_are_probability_vectors(
            rows in prop::collection::vec(0u32..6, 1..300),
            next in prop::collection::vec(0u32..6, 1..300),
            alpha in 0.0f64..5.0,
            lambda in 0.01f64..=1.0,
        ) {
            let t = trace(&rows, 6);
            let mle = mle_estimate(&t).unwrap();
            prop_assert!(valid(&mle.probs));
            prop_assert!(valid(&smoothed_estimate(&t, alpha).unwrap().probs));
            let batch = vec![trace(&next, 6).counts(0)];
            for mode in [UpdateMode::Cumulative, UpdateMode::Exponential(lambda)] {
                prop_assert!(valid(&update_moving_average(&mle, &batch, mode).unwrap().probs));
            }
        }
    }
}
