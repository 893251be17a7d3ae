//! Maps a prediction error rate to bottleneck load and extra communication.

use serde::{Deserialize, Serialize};

/// Where mispredicted tokens end up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorScenario {
    /// Errors leave the balance intact.
    Optimistic,
    /// Errors are spread evenly across GPUs.
    #[default]
    Typical,
    /// Every error lands on one GPU.
    Pessimistic,
}

/// Tokens on the busiest GPU when `avg_tokens` would be perfect balance.
///
/// The pessimistic bound is `G * (1 + eps) * avg` and so does not reduce to
/// `avg` at `eps = 0`.
pub fn bottleneck_tokens(
    avg_tokens: f64,
    eps: f64,
    scenario: ErrorScenario,
    gpu_count: usize,
) -> f64 {
    match scenario {
        ErrorScenario::Optimistic => avg_tokens,
        ErrorScenario::Typical => avg_tokens + eps * avg_tokens,
        ErrorScenario::Pessimistic => gpu_count as f64 * (avg_tokens + eps * avg_tokens),
    }
}

/// Misrouted tokens must still be forwarded, costing `eps` of a balanced
/// scatter.
pub fn comm_error_penalty(eps: f64, balanced_scatter_time: f64) -> f64 {
    eps * balanced_scatter_time
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn scenario_envelope(avg in 0.0f64..1e6, eps in 0.0f64..=1.0, g in 1usize..=64) {
            let o = bottleneck_tokens(avg, eps, ErrorScenario::Optimistic, g);
            let t = bottleneck_tokens(avg, eps, ErrorScenario::Typical, g);
            let p = bottleneck_tokens(avg, eps, ErrorScenario::Pessimistic, g);
            prop_assert!(o <= t && t <= p);
        }

        #[test]
        fn penalty_is_linear(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.0f64..1.0) {
            let mix = comm_error_penalty(0.5 * a + 0.5 * b, t);
            let avg = 0.5 * comm_error_penalty(a, t) + 0.5 * comm_error_penalty(b, t);
            prop_assert!((mix - avg).abs() <= 1e-12 * (1.0 + t));
            if a <= b {
                prop_assert!(comm_error_penalty(a, t) <= comm_error_penalty(b, t));
            }
        }
    }
}
