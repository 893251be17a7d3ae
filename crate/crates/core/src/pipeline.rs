//! Composes the cost primitives into the latency of one MoE layer under each
//! expert-prediction strategy.
//!
//! Layer flow: tensor-parallel attention, ring all-reduce of the
//! activations, scatter of routed tokens to their experts, expert FFN on the
//! busiest GPU, and the all-to-all gather back.

use serde::{Deserialize, Serialize};

use crate::costmodel::{
    attention_time, expert_transfer_time, ffn_time, ring_allreduce_time, scatter_time,
    ExpertAccounting, LatencyBreakdown,
};
use crate::domain::{HardwareConfig, ModelConfig, WorkloadConfig};
use crate::error::{Error, Result};
use crate::errormodel::{bottleneck_tokens, comm_error_penalty, ErrorScenario};
use crate::predictors::OverheadCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// No prediction; experts stay where they are.
    None,
    /// Predict per-expert token shares offline and duplicate experts.
    DistributionOnly,
    /// Predict each token's expert and route it directly.
    TokenToExpert,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::None,
        StrategyKind::DistributionOnly,
        StrategyKind::TokenToExpert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::DistributionOnly => "distribution_only",
            StrategyKind::TokenToExpert => "token_to_expert",
        }
    }
}

/// A prediction strategy and its error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub kind: StrategyKind,
    /// Token-to-expert accuracy in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Distribution-only error rate (normalized L1 distance).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    #[serde(default)]
    pub error_scenario: ErrorScenario,
}

impl PredictorSpec {
    pub fn none() -> Self {
        Self {
            kind: StrategyKind::None,
            accuracy: None,
            error_rate: None,
            error_scenario: ErrorScenario::Typical,
        }
    }

    pub fn distribution_only(error_rate: f64) -> Self {
        Self {
            kind: StrategyKind::DistributionOnly,
            error_rate: Some(error_rate),
            ..Self::none()
        }
    }

    pub fn token_to_expert(accuracy: f64) -> Self {
        Self {
            kind: StrategyKind::TokenToExpert,
            accuracy: Some(accuracy),
            ..Self::none()
        }
    }

    pub fn with_scenario(mut self, scenario: ErrorScenario) -> Self {
        self.error_scenario = scenario;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        match (self.kind, self.accuracy, self.error_rate) {
            (StrategyKind::None, None, None) => Ok(()),
            (StrategyKind::DistributionOnly, None, Some(e)) if in_unit(e) => Ok(()),
            (StrategyKind::TokenToExpert, Some(a), None) if in_unit(a) => Ok(()),
            (kind, a, e) => Err(Error::invalid(format!(
                "inconsistent strategy: {} with accuracy {a:?} and error_rate {e:?}",
                kind.as_str()
            ))),
        }
    }

    /// Prediction error: `1 - accuracy` or the distribution error rate.
    pub fn epsilon(&self) -> f64 {
        match self.kind {
            StrategyKind::None => 0.0,
            StrategyKind::DistributionOnly => self.error_rate.unwrap_or(0.0),
            StrategyKind::TokenToExpert => 1.0 - self.accuracy.unwrap_or(1.0),
        }
    }
}

/// How distribution-only prediction treats the post-FFN all-to-all.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatherMode {
    /// Same skew-bound cost as the baseline.
    #[default]
    Skewed,
    /// Balanced (`skew = 1`) once duplication equalizes per-GPU tokens.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub distribution_only_gather: GatherMode,
    /// Batches served per prediction and placement; residual transfer time
    /// and prediction overhead are divided by it.
    pub placement_interval: f64,
    /// Experts sent to each GPU per layer when re-placing.
    pub experts_moved: u64,
    pub expert_accounting: ExpertAccounting,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            distribution_only_gather: GatherMode::Skewed,
            placement_interval: 1.0,
            experts_moved: 1,
            expert_accounting: ExpertAccounting::Full,
        }
    }
}

impl SimOptions {
    fn validate(&self) -> Result<()> {
        if !(self.placement_interval.is_finite() && self.placement_interval >= 1.0) {
            return Err(Error::invalid(format!(
                "placement_interval must be >= 1, got {}",
                self.placement_interval
            )));
        }
        Ok(())
    }
}

/// Expert-weight transfer time left over after hiding it under attention.
pub fn placement_residual(
    model: &ModelConfig,
    hw: &HardwareConfig,
    attention: f64,
    options: &SimOptions,
) -> f64 {
    let transfer =
        expert_transfer_time(model, hw, options.experts_moved, options.expert_accounting);
    (transfer - attention).max(0.0) / options.placement_interval
}

/// Latency of one MoE layer under `strategy`. The workload must carry a
/// skewness; token-to-expert additionally needs an overhead curve.
pub fn simulate_layer(
    strategy: &PredictorSpec,
    model: &ModelConfig,
    workload: &WorkloadConfig,
    hw: &HardwareConfig,
    curve: Option<&OverheadCurve>,
    options: &SimOptions,
) -> Result<LatencyBreakdown> {
    strategy.validate()?;
    model.validate()?;
    hw.validate()?;
    workload.validate(model.num_experts)?;
    options.validate()?;
    let skew = workload.require_skewness()?;

    let g = hw.gpu_count;
    let tokens = workload.tokens() as u64;
    let token_bytes = tokens * model.hidden_dim as u64 * model.bytes_per_param as u64;
    let routed_bytes = token_bytes * model.top_k as u64;
    let avg_tokens = (tokens * model.top_k as u64) as f64 / g as f64;

    let attention = attention_time(model, workload, hw);
    let allreduce = ring_allreduce_time(token_bytes, hw);
    let skewed_a2a = scatter_time(routed_bytes, skew, hw)?;
    let balanced_a2a = scatter_time(routed_bytes, 1.0, hw)?;
    let eps = strategy.epsilon();

    let b = match strategy.kind {
        StrategyKind::None => {
            // The busiest GPU cannot hold more than every routed token.
            let ffn = ffn_time(skew.min(g as f64) * avg_tokens, model, hw)?;
            LatencyBreakdown::new(attention, allreduce, skewed_a2a, ffn, skewed_a2a, 0.0, 0.0)
        }
        StrategyKind::DistributionOnly => {
            let load = bottleneck_tokens(avg_tokens, eps, strategy.error_scenario, g);
            let ffn = ffn_time(load, model, hw)?;
            let gather = match options.distribution_only_gather {
                GatherMode::Skewed => skewed_a2a,
                GatherMode::Balanced => balanced_a2a,
            };
            let residual = placement_residual(model, hw, attention, options);
            LatencyBreakdown::new(attention, allreduce, skewed_a2a, ffn, gather, 0.0, residual)
        }
        StrategyKind::TokenToExpert => {
            let curve =
                curve.ok_or_else(|| Error::invalid("token_to_expert needs an overhead curve"))?;
            let accuracy = strategy.accuracy.unwrap_or(1.0);
            let load = bottleneck_tokens(avg_tokens, eps, strategy.error_scenario, g);
            let ffn = ffn_time(load, model, hw)?;
            let scatter = comm_error_penalty(eps, balanced_a2a);
            let residual = placement_residual(model, hw, attention, options);
            // Overhead is a share of the layer's own runtime; amortized weight
            // transfer is not part of it.
            let runtime = attention + allreduce + scatter + ffn + balanced_a2a;
            let overhead =
                curve.overhead_fraction(accuracy, skew) * runtime / options.placement_interval;
            LatencyBreakdown::new(
                attention,
                allreduce,
                scatter,
                ffn,
                balanced_a2a,
                overhead,
                residual,
            )
        }
    };
    Ok(b)
}

/// All `num_layers` layers of the prefill.
pub fn simulate_prefill(
    strategy: &PredictorSpec,
    model: &ModelConfig,
    workload: &WorkloadConfig,
    hw: &HardwareConfig,
    curve: Option<&OverheadCurve>,
    options: &SimOptions,
) -> Result<LatencyBreakdown> {
    let layer = simulate_layer(strategy, model, workload, hw, curve, options)?;
    Ok(layer.scaled(model.num_layers as f64))
}
