//! Roofline cost primitives: GEMM, attention, expert FFN, and the
//! collectives used around an expert-parallel MoE layer.
//!
//! Every operation is reduced to a FLOP count and a byte count; its time is
//! the larger of the compute-limited and bandwidth-limited bounds.

use serde::{Deserialize, Serialize};

use crate::domain::{HardwareConfig, ModelConfig, WorkloadConfig};
use crate::error::{Error, Result};

/// Per-component latency of one simulated layer, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub attention: f64,
    pub allreduce: f64,
    pub scatter: f64,
    pub ffn: f64,
    pub gather: f64,
    pub prediction_overhead: f64,
    pub placement_residual: f64,
    pub total: f64,
}

impl LatencyBreakdown {
    pub fn new(
        attention: f64,
        allreduce: f64,
        scatter: f64,
        ffn: f64,
        gather: f64,
        prediction_overhead: f64,
        placement_residual: f64,
    ) -> Self {
        let mut b = Self {
            attention,
            allreduce,
            scatter,
            ffn,
            gather,
            prediction_overhead,
            placement_residual,
            total: 0.0,
        };
        b.total = b.component_sum();
        b
    }

    pub fn component_sum(&self) -> f64 {
        self.attention
            + self.allreduce
            + self.scatter
            + self.ffn
            + self.gather
            + self.prediction_overhead
            + self.placement_residual
    }

    /// Every component (and the total) multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.attention * factor,
            self.allreduce * factor,
            self.scatter * factor,
            self.ffn * factor,
            self.gather * factor,
            self.prediction_overhead * factor,
            self.placement_residual * factor,
        )
    }

    /// Time spent moving activations between GPUs.
    pub fn communication(&self) -> f64 {
        self.allreduce + self.scatter + self.gather
    }
}

/// FLOPs and bytes of one kernel-level operation on a single GPU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCost {
    pub flops: f64,
    pub bytes: f64,
}

impl OpCost {
    pub fn compute_time(&self, hw: &HardwareConfig) -> f64 {
        self.flops / hw.effective_flops()
    }

    pub fn memory_time(&self, hw: &HardwareConfig) -> f64 {
        self.bytes / hw.mem_bandwidth
    }

    pub fn time(&self, hw: &HardwareConfig) -> f64 {
        self.compute_time(hw).max(self.memory_time(hw))
    }
}

/// `m x k` times `k x n`, reading both operands and writing the result once.
/// Dimensions may be fractional when they come from averaged token counts.
pub fn gemm_cost(m: f64, n: f64, k: f64, bytes_per_param: usize) -> OpCost {
    OpCost {
        flops: 2.0 * m * n * k,
        bytes: (m * k + k * n + m * n) * bytes_per_param as f64,
    }
}

pub fn gemm_time(
    m: u64,
    n: u64,
    k: u64,
    bytes_per_param: usize,
    hw: &HardwareConfig,
) -> Result<f64> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "gemm dimensions must be >= 1, got {m}x{n}x{k}"
        )));
    }
    Ok(gemm_cost(m as f64, n as f64, k as f64, bytes_per_param).time(hw))
}

/// Sum over queries of the causal context length, `min(i + 1, window)`.
pub fn causal_context_sum(seq_len: u64, window: Option<u64>) -> u64 {
    let s = seq_len;
    match window {
        Some(w) if w < s => w * (w + 1) / 2 + (s - w) * w,
        _ => s * (s + 1) / 2,
    }
}

/// The four attention kernels on one GPU of a tensor-parallel group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOps {
    pub qkv_projection: OpCost,
    pub scores: OpCost,
    pub values: OpCost,
    pub output_projection: OpCost,
}

impl AttentionOps {
    pub fn iter(&self) -> impl Iterator<Item = &OpCost> {
        [
            &self.qkv_projection,
            &self.scores,
            &self.values,
            &self.output_projection,
        ]
        .into_iter()
    }

    pub fn compute_time(&self, hw: &HardwareConfig) -> f64 {
        self.iter().map(|op| op.compute_time(hw)).sum()
    }
}

/// Heads are split across `tp_degree` GPUs; when there are fewer heads than
/// GPUs each GPU still holds one (padded) head.
pub fn attention_ops(
    model: &ModelConfig,
    workload: &WorkloadConfig,
    tp_degree: usize,
) -> AttentionOps {
    let g = tp_degree.max(1);
    let d = model.hidden_dim as f64;
    let head_dim = model.head_dim() as f64;
    let heads = model.num_heads.div_ceil(g) as f64;
    let kv_heads = model.num_kv_heads.div_ceil(g) as f64;
    let tokens = workload.tokens() as f64;
    let batch = workload.batch_size as f64;
    let seq = workload.seq_len as f64;
    let bpp = model.bytes_per_param;

    let ctx = causal_context_sum(
        workload.seq_len as u64,
        model.sliding_window.map(|w| w as u64),
    ) as f64;
    let per_head_seqs = heads * batch;
    let scores = OpCost {
        flops: 2.0 * head_dim * ctx * per_head_seqs,
        bytes: (2.0 * seq * head_dim + ctx) * per_head_seqs * bpp as f64,
    };
    let values = OpCost {
        flops: 2.0 * head_dim * ctx * per_head_seqs,
        bytes: (ctx + 2.0 * seq * head_dim) * per_head_seqs * bpp as f64,
    };

    AttentionOps {
        qkv_projection: gemm_cost(tokens, (heads + 2.0 * kv_heads) * head_dim, d, bpp),
        scores,
        values,
        output_projection: gemm_cost(tokens, d, heads * head_dim, bpp),
    }
}

/// Tensor-parallel attention over all `B*S` tokens, including the per-token
/// element-wise allowance.
pub fn attention_time(model: &ModelConfig, workload: &WorkloadConfig, hw: &HardwareConfig) -> f64 {
    let ops = attention_ops(model, workload, hw.gpu_count);
    ops.iter().map(|op| op.time(hw)).sum::<f64>()
        + model.elementwise_time_per_token * workload.tokens() as f64
}

/// Bandwidth-optimal ring all-reduce of `bytes` across all GPUs.
pub fn ring_allreduce_time(bytes: u64, hw: &HardwareConfig) -> f64 {
    let g = hw.gpu_count as f64;
    2.0 * (g - 1.0) / g * bytes as f64 / hw.link_bandwidth + 2.0 * (g - 1.0) * hw.link_latency
}

/// Share of all routed token bytes that the busiest GPU must receive:
/// `(G - 1) * skew / G^2`.
pub fn scatter_fraction(gpu_count: usize, skew: f64) -> f64 {
    let g = gpu_count as f64;
    (g - 1.0) * skew / (g * g)
}

/// Expert-parallel all-to-all bounded by the GPU that hosts the most
/// popular expert.
pub fn scatter_time(token_bytes_total: u64, skew: f64, hw: &HardwareConfig) -> Result<f64> {
    if !(skew.is_finite() && skew >= 1.0) {
        return Err(Error::invalid(format!("skew must be >= 1, got {skew}")));
    }
    let bottleneck = token_bytes_total as f64 * scatter_fraction(hw.gpu_count, skew);
    Ok(bottleneck / hw.link_bandwidth + hw.link_latency)
}

/// The expert GEMMs for `tokens` tokens on one GPU.
pub fn ffn_ops(tokens: f64, model: &ModelConfig) -> Vec<OpCost> {
    let d = model.hidden_dim as f64;
    let f = model.ffn_dim as f64;
    let bpp = model.bytes_per_param;
    let up = gemm_cost(tokens, f, d, bpp);
    let down = gemm_cost(tokens, d, f, bpp);
    match model.activation {
        crate::domain::Activation::Swiglu => vec![up, up, down],
        crate::domain::Activation::Relu => vec![up, down],
    }
}

pub fn ffn_time(tokens: f64, model: &ModelConfig, hw: &HardwareConfig) -> Result<f64> {
    if !(tokens.is_finite() && tokens >= 0.0) {
        return Err(Error::invalid(format!(
            "token count must be >= 0, got {tokens}"
        )));
    }
    if tokens == 0.0 {
        return Ok(0.0);
    }
    Ok(ffn_ops(tokens, model).iter().map(|op| op.time(hw)).sum())
}

/// How expert weights are counted when moving an expert between GPUs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertAccounting {
    /// Every weight matrix of the expert (three for SwiGLU, two for ReLU).
    #[default]
    Full,
    /// Two `hidden_dim x ffn_dim` matrices regardless of activation.
    TwoMatrix,
}

pub fn expert_weight_bytes(model: &ModelConfig, accounting: ExpertAccounting) -> u64 {
    let matrices = match accounting {
        ExpertAccounting::Full => model.activation.weight_matrices(),
        ExpertAccounting::TwoMatrix => 2,
    };
    matrices * model.hidden_dim as u64 * model.ffn_dim as u64 * model.bytes_per_param as u64
}

pub fn expert_transfer_time(
    model: &ModelConfig,
    hw: &HardwareConfig,
    experts_moved: u64,
    accounting: ExpertAccounting,
) -> f64 {
    experts_moved as f64 * expert_weight_bytes(model, accounting) as f64 / hw.link_bandwidth
}
