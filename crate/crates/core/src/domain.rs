//! Configuration and trace types shared across the simulator, plus skewness
//! measurement and synthetic routing-trace generation.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a probability vector sums to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    FullyConnected,
}

/// Multi-GPU system description. All rates are per GPU (or per GPU pair for
/// the link).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub gpu_count: usize,
    /// FLOP/s per GPU.
    pub peak_flops: f64,
    /// Achieved fraction of `peak_flops`, in (0, 1].
    pub compute_efficiency: f64,
    /// Bytes/s of device memory per GPU.
    pub mem_bandwidth: f64,
    /// Bytes/s between any pair of GPUs.
    pub link_bandwidth: f64,
    /// Seconds per link hop.
    pub link_latency: f64,
    #[serde(default)]
    pub topology: Topology,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_count < 2 {
            return Err(Error::invalid(format!(
                "gpu_count must be >= 2, got {}",
                self.gpu_count
            )));
        }
        for (name, v) in [
            ("peak_flops", self.peak_flops),
            ("mem_bandwidth", self.mem_bandwidth),
            ("link_bandwidth", self.link_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.compute_efficiency > 0.0 && self.compute_efficiency <= 1.0) {
            return Err(Error::invalid(format!(
                "compute_efficiency must be in (0, 1], got {}",
                self.compute_efficiency
            )));
        }
        if !(self.link_latency.is_finite() && self.link_latency >= 0.0) {
            return Err(Error::invalid(format!(
                "link_latency must be non-negative, got {}",
                self.link_latency
            )));
        }
        Ok(())
    }

    /// Sustained FLOP/s.
    pub fn effective_flops(&self) -> f64 {
        self.peak_flops * self.compute_efficiency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Gated FFN: gate, up and down projections.
    Swiglu,
    /// Plain FFN: up and down projections.
    Relu,
}

impl Activation {
    /// Number of `hidden_dim x ffn_dim` weight matrices per expert.
    pub fn weight_matrices(self) -> u64 {
        match self {
            Activation::Swiglu => 3,
            Activation::Relu => 2,
        }
    }
}

/// One transformer layer's dimensions plus the MoE routing shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    /// Grouped-query attention when smaller than `num_heads`.
    pub num_kv_heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sliding_window: Option<usize>,
    pub activation: Activation,
    pub bytes_per_param: usize,
    pub num_layers: usize,
    /// Seconds of element-wise/softmax work per token, added to attention.
    #[serde(default)]
    pub elementwise_time_per_token: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("top_k", self.top_k),
            ("bytes_per_param", self.bytes_per_param),
            ("num_layers", self.num_layers),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.num_experts < 2 {
            return Err(Error::invalid(format!(
                "num_experts must be >= 2, got {}",
                self.num_experts
            )));
        }
        if self.top_k > self.num_experts {
            return Err(Error::invalid(format!(
                "top_k ({}) exceeds num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::invalid(format!(
                "num_heads ({}) not divisible by num_kv_heads ({})",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "hidden_dim ({}) not divisible by num_heads ({})",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.sliding_window == Some(0) {
            return Err(Error::invalid("sliding_window must be >= 1 when set"));
        }
        if !(self.elementwise_time_per_token.is_finite() && self.elementwise_time_per_token >= 0.0)
        {
            return Err(Error::invalid("elementwise_time_per_token must be >= 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skewness: Option<f64>,
}

impl WorkloadConfig {
    pub fn tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::invalid("batch_size and seq_len must be >= 1"));
        }
        if let Some(s) = self.skewness {
            check_skew_range(s, num_experts)?;
        }
        Ok(())
    }

    /// The configured skewness, or an error if the workload carries none.
    pub fn require_skewness(&self) -> Result<f64> {
        self.skewness
            .ok_or_else(|| Error::invalid("workload.skewness is required here"))
    }
}

fn check_skew_range(s: f64, num_experts: usize) -> Result<()> {
    if !(s.is_finite() && s >= 1.0 && s <= num_experts as f64) {
        return Err(Error::invalid(format!(
            "skewness must lie in [1, {num_experts}], got {s}"
        )));
    }
    Ok(())
}

/// Per-layer expert selection probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct TokenDistribution {
    layers: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    layers: Vec<Vec<f64>>,
}

impl TryFrom<RawDistribution> for TokenDistribution {
    type Error = Error;
    fn try_from(raw: RawDistribution) -> Result<Self> {
        TokenDistribution::new(raw.layers)
    }
}

impl From<TokenDistribution> for RawDistribution {
    fn from(d: TokenDistribution) -> Self {
        RawDistribution { layers: d.layers }
    }
}

impl TokenDistribution {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::invalid("distribution has no layers"));
        };
        let width = first.len();
        if width == 0 {
            return Err(Error::invalid("distribution has no experts"));
        }
        for (l, p) in layers.iter().enumerate() {
            if p.len() != width {
                return Err(Error::invalid(format!(
                    "layer {l} has {} experts, expected {width}",
                    p.len()
                )));
            }
            if p.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::invalid(format!("layer {l} has a negative entry")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::invalid(format!("layer {l} sums to {sum}, not 1")));
            }
        }
        Ok(Self { layers })
    }

    pub fn single(p: Vec<f64>) -> Result<Self> {
        Self::new(vec![p])
    }

    /// The same probability vector repeated for `num_layers` layers.
    pub fn repeated(p: Vec<f64>, num_layers: usize) -> Result<Self> {
        Self::new(vec![p; num_layers.max(1)])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_experts(&self) -> usize {
        self.layers[0].len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }
}

/// Routing of every token in one layer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceLayer {
    /// `experts[t]` lists the `top_k` experts token `t` was routed to.
    pub experts: Vec<Vec<u32>>,
    /// Vocabulary id of each token, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    /// Position of each token within its sequence, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<u32>>,
}

impl TraceLayer {
    pub fn from_experts(experts: Vec<Vec<u32>>) -> Self {
        Self {
            experts,
            ..Default::default()
        }
    }

    pub fn token_count(&self) -> usize {
        self.experts.len()
    }

    /// Routed-assignment counts per expert.
    pub fn counts(&self, num_experts: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_experts];
        for e in self.experts.iter().flatten() {
            counts[*e as usize] += 1;
        }
        counts
    }
}

/// Per-layer token-to-expert routing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertTrace {
    num_experts: usize,
    top_k: usize,
    layers: Vec<TraceLayer>,
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    layer: usize,
    experts: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<u32>>,
}

impl ExpertTrace {
    /// Builds a trace, checking that every token carries the same number of
    /// in-range expert ids and that every layer has the same token count.
    pub fn new(num_experts: usize, layers: Vec<TraceLayer>) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::invalid("num_experts must be >= 1"));
        }
        let Some(first) = layers.first() else {
            return Err(Error::invalid("trace has no layers"));
        };
        let tokens = first.token_count();
        let top_k = first.experts.first().map_or(0, Vec::len);
        if tokens > 0 && top_k == 0 {
            return Err(Error::invalid("tokens must carry at least one expert"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.token_count() != tokens {
                return Err(Error::invalid(format!(
                    "layer {l} has {} tokens, expected {tokens}",
                    layer.token_count()
                )));
            }
            for (t, row) in layer.experts.iter().enumerate() {
                if row.len() != top_k {
                    return Err(Error::invalid(format!(
                        "layer {l} token {t} has {} experts, expected {top_k}",
                        row.len()
                    )));
                }
                if let Some(&bad) = row.iter().find(|&&e| e as usize >= num_experts) {
                    return Err(Error::invalid(format!(
                        "layer {l} token {t} routes to expert {bad} >= {num_experts}"
                    )));
                }
            }
            for (name, keys) in [
                ("token_ids", &layer.token_ids),
                ("positions", &layer.positions),
            ] {
                if let Some(k) = keys {
                    if k.len() != tokens {
                        return Err(Error::invalid(format!(
                            "layer {l} {name} has {} entries, expected {tokens}",
                            k.len()
                        )));
                    }
                }
            }
        }
        Ok(Self {
            num_experts,
            top_k,
            layers,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn token_count(&self) -> usize {
        self.layers[0].token_count()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[TraceLayer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &TraceLayer {
        &self.layers[l]
    }

    pub fn counts(&self, l: usize) -> Vec<u64> {
        self.layers[l].counts(self.num_experts)
    }

    pub fn layer_skewness(&self) -> Result<Vec<f64>> {
        (0..self.num_layers())
            .map(|l| skewness_of_counts(&self.counts(l)))
            .collect()
    }

    /// Mean of the per-layer skewness values.
    pub fn mean_skewness(&self) -> Result<f64> {
        let per_layer = self.layer_skewness()?;
        Ok(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
    }

    /// Appends `other`'s tokens to this trace layer by layer.
    pub fn concat(&self, other: &ExpertTrace) -> Result<ExpertTrace> {
        if self.num_experts != other.num_experts || self.num_layers() != other.num_layers() {
            return Err(Error::invalid(
                "cannot concatenate traces of different shape",
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let join = |x: &Option<Vec<u32>>, y: &Option<Vec<u32>>| match (x, y) {
                    (Some(x), Some(y)) => Some(x.iter().chain(y).copied().collect()),
                    _ => None,
                };
                TraceLayer {
                    experts: a.experts.iter().chain(&b.experts).cloned().collect(),
                    token_ids: join(&a.token_ids, &b.token_ids),
                    positions: join(&a.positions, &b.positions),
                }
            })
            .collect();
        ExpertTrace::new(self.num_experts, layers)
    }

    /// Writes one JSON object per layer.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let rec = TraceRecord {
                layer: l,
                experts: layer.experts.clone(),
                token_ids: layer.token_ids.clone(),
                positions: layer.positions.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a JSON-lines trace. When `num_experts` is `None` it is inferred
    /// as one more than the largest expert id seen.
    pub fn read_jsonl<R: BufRead>(input: R, num_experts: Option<usize>) -> Result<Self> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("bad trace record: {e}")))?;
            records.push(rec);
        }
        records.sort_by_key(|r| r.layer);
        for (i, r) in records.iter().enumerate() {
            if r.layer != i {
                return Err(Error::invalid(format!(
                    "trace layers must be 0..n without gaps; found layer {}",
                    r.layer
                )));
            }
        }
        let inferred = records
            .iter()
            .flat_map(|r| r.experts.iter().flatten())
            .max()
            .map_or(0, |&m| m as usize + 1);
        let num_experts = num_experts.unwrap_or(inferred);
        let layers = records
            .into_iter()
            .map(|r| TraceLayer {
                experts: r.experts,
                token_ids: r.token_ids,
                positions: r.positions,
            })
            .collect();
        ExpertTrace::new(num_experts, layers)
    }
}

/// Load of the most popular expert divided by the mean load per expert.
pub fn skewness_of(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::invalid("skewness of an empty count vector"));
    }
    if counts.iter().any(|&c| !(c.is_finite() && c >= 0.0)) {
        return Err(Error::invalid("counts must be finite and non-negative"));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("skewness of all-zero counts"));
    }
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max / (total / counts.len() as f64))
}

pub fn skewness_of_counts(counts: &[u64]) -> Result<f64> {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    skewness_of(&as_f)
}

/// Single-layer distribution with one hot expert at probability `s / E` and
/// the remainder spread evenly over the other experts.
pub fn distribution_from_skewness(num_experts: usize, skewness: f64) -> Result<TokenDistribution> {
    if num_experts < 2 {
        return Err(Error::invalid("need at least two experts"));
    }
    check_skew_range(skewness, num_experts)?;
    let e = num_experts as f64;
    let hot = skewness / e;
    let tail = (1.0 - hot) / (e - 1.0);
    let mut p = vec![tail.max(0.0); num_experts];
    p[0] = hot;
    TokenDistribution::single(p)
}

/// Draws `B*S` tokens per layer from `dist`. Each (layer, token) pair reads
/// its own window of a ChaCha keystream, so the result does not depend on
/// generation order.
pub fn sample_trace(
    dist: &TokenDistribution,
    workload: &WorkloadConfig,
    top_k: usize,
    seed: u64,
) -> Result<ExpertTrace> {
    let num_experts = dist.num_experts();
    if top_k == 0 || top_k > num_experts {
        return Err(Error::invalid(format!(
            "top_k must be in [1, {num_experts}], got {top_k}"
        )));
    }
    if workload.batch_size == 0 || workload.seq_len == 0 {
        return Err(Error::invalid("batch_size and seq_len must be >= 1"));
    }
    let tokens = workload.tokens();
    // Each draw consumes one u64, i.e. two 32-bit keystream words.
    let words_per_token = 2 * top_k as u128;
    let layers = (0..dist.num_layers())
        .map(|l| {
            let p = dist.layer(l);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(l as u64);
            let mut weights = vec![0.0; num_experts];
            let experts = (0..tokens)
                .map(|t| {
                    rng.set_word_pos(t as u128 * words_per_token);
                    weights.copy_from_slice(p);
                    draw_without_replacement(&mut rng, &mut weights, top_k)
                })
                .collect();
            TraceLayer {
                experts,
                token_ids: None,
                positions: Some((0..tokens).map(|t| (t % workload.seq_len) as u32).collect()),
            }
        })
        .collect();
    ExpertTrace::new(num_experts, layers)
}

/// Draws `k` distinct indices with probability proportional to the remaining
/// weights. Once all remaining weight is zero, picks uniformly among the
/// unselected indices.
fn draw_without_replacement<R: Rng>(rng: &mut R, weights: &mut [f64], k: usize) -> Vec<u32> {
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; weights.len()];
    for _ in 0..k {
        let u: f64 = rng.gen();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let target = u * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    last_positive = i;
                    acc += w;
                    if target < acc {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            let free: Vec<usize> = (0..weights.len()).filter(|&i| !taken[i]).collect();
            free[((u * free.len() as f64) as usize).min(free.len() - 1)]
        };
        taken[pick] = true;
        weights[pick] = 0.0;
        chosen.push(pick as u32);
    }
    chosen
}
