//! Reference model, hardware and calibration values used by the shipped
//! configs. Compute rates are editable defaults, not measurements.

use crate::domain::{Activation, HardwareConfig, ModelConfig, Topology, WorkloadConfig};
use crate::predictors::{CurveAnchor, OverheadCurve};

/// 8-expert, top-2 layer with grouped-query attention, SwiGLU experts and a
/// 4096-token sliding window.
pub fn mixtral_8x7b() -> ModelConfig {
    ModelConfig {
        hidden_dim: 4096,
        ffn_dim: 14336,
        num_heads: 32,
        num_kv_heads: 8,
        num_experts: 8,
        top_k: 2,
        sliding_window: Some(4096),
        activation: Activation::Swiglu,
        bytes_per_param: 2,
        num_layers: 32,
        elementwise_time_per_token: 0.0,
    }
}

/// LLaMA-MoE-style layer: SwiGLU experts, no sliding window.
pub fn llama_moe_like() -> ModelConfig {
    ModelConfig {
        ffn_dim: 11008,
        num_kv_heads: 32,
        sliding_window: None,
        ..mixtral_8x7b()
    }
}

/// Switch-Transformer-style layer: top-1 routing, ReLU experts, full
/// multi-head attention.
pub fn switch_like() -> ModelConfig {
    ModelConfig {
        hidden_dim: 768,
        ffn_dim: 3072,
        num_heads: 12,
        num_kv_heads: 12,
        num_experts: 8,
        top_k: 1,
        sliding_window: None,
        activation: Activation::Relu,
        bytes_per_param: 2,
        num_layers: 12,
        elementwise_time_per_token: 0.0,
    }
}

/// One sequence of 512 tokens.
pub fn reference_workload() -> WorkloadConfig {
    WorkloadConfig {
        batch_size: 1,
        seq_len: 512,
        skewness: Some(1.4),
    }
}

pub const NVLINK_BANDWIDTH: f64 = 2e12;
pub const PCIE_BANDWIDTH: f64 = 32e9;
/// The two intermediate interconnect points of the savings comparison.
pub const MID_HIGH_BANDWIDTH: f64 = 600e9;
pub const MID_LOW_BANDWIDTH: f64 = 64e9;

/// Four A100-class GPUs, fully connected, with the given link bandwidth.
pub fn a100_with_link(link_bandwidth: f64) -> HardwareConfig {
    HardwareConfig {
        gpu_count: 4,
        peak_flops: 312e12,
        compute_efficiency: 0.2,
        mem_bandwidth: 1.555e12,
        link_bandwidth,
        link_latency: 1e-6,
        topology: Topology::FullyConnected,
    }
}

pub fn a100_nvlink() -> HardwareConfig {
    a100_with_link(NVLINK_BANDWIDTH)
}

pub fn a100_pcie() -> HardwareConfig {
    a100_with_link(PCIE_BANDWIDTH)
}

/// `(id, hardware)` for every shipped interconnect setting.
pub fn interconnect_presets() -> Vec<(&'static str, HardwareConfig)> {
    vec![
        ("nvlink", a100_nvlink()),
        ("link600", a100_with_link(MID_HIGH_BANDWIDTH)),
        ("link64", a100_with_link(MID_LOW_BANDWIDTH)),
        ("pcie", a100_pcie()),
    ]
}

/// Shipped accuracy-to-overhead calibration. Replace with curves fitted to
/// measured predictor runs.
pub fn reference_curve() -> OverheadCurve {
    let anchor = |skewness, alpha, beta| CurveAnchor {
        skewness,
        alpha,
        beta,
    };
    OverheadCurve::new(vec![
        anchor(1.0, 2e-4, 9.0),
        anchor(1.4, 1e-4, 8.0),
        anchor(2.0, 1e-4, 7.0),
        anchor(3.0, 5e-5, 6.0),
    ])
    .expect("reference curve is valid")
}

/// `0.60, 0.65, ..., 0.95, 0.99`.
pub fn default_accuracy_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..8).map(|i| (60 + 5 * i) as f64 / 100.0).collect();
    grid.push(0.99);
    grid
}

/// Skewness points of the reference latency sweep.
pub fn reference_skew_grid() -> Vec<f64> {
    vec![1.0, 1.4, 2.0, 2.6]
}
