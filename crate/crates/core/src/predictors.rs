//! Token-to-expert prediction: frequency-based predictors, accuracy
//! evaluation on held-out traces, and the accuracy-to-overhead curve that
//! stands in for neural predictors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{ExpertTrace, TraceLayer};
use crate::error::{Error, Result};

/// Anything that guesses the experts a token will be routed to.
pub trait ExpertPredictor {
    /// Predicted experts for token `token` of layer `layer`, best first.
    fn predict(&self, layer: usize, record: &TraceLayer, token: usize) -> Result<&[u32]>;
}

/// Expert ids ordered by count (descending), ties by lower id.
fn rank_experts(counts: &[u64], keep: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..counts.len() as u32).collect();
    ids.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    ids.truncate(keep);
    ids
}

/// Predicts the globally most frequent experts of each layer for every token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbabilityModel {
    per_layer: Vec<Vec<u32>>,
}

impl ProbabilityModel {
    pub fn layer_prediction(&self, layer: usize) -> &[u32] {
        &self.per_layer[layer]
    }
}

impl ExpertPredictor for ProbabilityModel {
    fn predict(&self, layer: usize, _record: &TraceLayer, _token: usize) -> Result<&[u32]> {
        self.per_layer
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("predictor has no layer {layer}")))
    }
}

pub fn fit_probability_model(train: &ExpertTrace) -> ProbabilityModel {
    let k = train.top_k().max(1);
    ProbabilityModel {
        per_layer: (0..train.num_layers())
            .map(|l| rank_experts(&train.counts(l), k))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKey {
    TokenId,
    Position,
}

fn keys_of(record: &TraceLayer, key: ConditionKey) -> Result<&[u32]> {
    let keys = match key {
        ConditionKey::TokenId => record.token_ids.as_deref(),
        ConditionKey::Position => record.positions.as_deref(),
    };
    keys.ok_or_else(|| {
        Error::invalid(match key {
            ConditionKey::TokenId => "trace carries no token ids",
            ConditionKey::Position => "trace carries no positions",
        })
    })
}

/// Predicts, per layer and key value, the experts most often selected for
/// that key in training. Unseen keys fall back to the global ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionalModel {
    key: ConditionKey,
    per_key: Vec<BTreeMap<u32, Vec<u32>>>,
    fallback: ProbabilityModel,
}

impl ConditionalModel {
    pub fn key(&self) -> ConditionKey {
        self.key
    }
}

impl ExpertPredictor for ConditionalModel {
    fn predict(&self, layer: usize, record: &TraceLayer, token: usize) -> Result<&[u32]> {
        let keys = keys_of(record, self.key)?;
        let table = self
            .per_key
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("predictor has no layer {layer}")))?;
        match table.get(&keys[token]) {
            Some(p) => Ok(p),
            None => self.fallback.predict(layer, record, token),
        }
    }
}

pub fn fit_conditional_model(train: &ExpertTrace, key: ConditionKey) -> Result<ConditionalModel> {
    let k = train.top_k().max(1);
    let e = train.num_experts();
    let per_key = train
        .layers()
        .iter()
        .map(|record| {
            let keys = keys_of(record, key)?;
            let mut counts: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
            for (row, &kv) in record.experts.iter().zip(keys) {
                let c = counts.entry(kv).or_insert_with(|| vec![0; e]);
                for &x in row {
                    c[x as usize] += 1;
                }
            }
            Ok(counts
                .into_iter()
                .map(|(kv, c)| (kv, rank_experts(&c, k)))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalModel {
        key,
        per_key,
        fallback: fit_probability_model(train),
    })
}

/// Fraction of routed assignments whose expert appears in the prediction,
/// averaged over layers.
pub fn evaluate_accuracy<P: ExpertPredictor + ?Sized>(
    predictor: &P,
    test: &ExpertTrace,
) -> Result<f64> {
    let k = test.top_k();
    if test.token_count() == 0 || k == 0 {
        return Err(Error::invalid("test trace has no tokens"));
    }
    let mut sum = 0.0;
    for (l, record) in test.layers().iter().enumerate() {
        let mut hits = 0usize;
        for (t, actual) in record.experts.iter().enumerate() {
            let guess = predictor.predict(l, record, t)?;
            hits += actual
                .iter()
                .filter(|e| guess[..guess.len().min(k)].contains(e))
                .count();
        }
        sum += hits as f64 / (record.token_count() * k) as f64;
    }
    Ok(sum / test.num_layers() as f64)
}

/// Fitted overhead at one measured skewness: `alpha * exp(beta * accuracy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveAnchor {
    pub skewness: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl CurveAnchor {
    pub fn overhead(&self, accuracy: f64) -> f64 {
        self.alpha * (self.beta * accuracy).exp()
    }
}

/// Prediction overhead, as a fraction of layer runtime, versus accuracy.
/// Parameters are interpolated linearly in skewness between anchors and
/// clamped beyond the outermost ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveFile", into = "CurveFile")]
pub struct OverheadCurve {
    anchors: Vec<CurveAnchor>,
}

#[derive(Serialize, Deserialize)]
struct CurveFile {
    anchors: Vec<CurveAnchor>,
}

impl TryFrom<CurveFile> for OverheadCurve {
    type Error = Error;
    fn try_from(f: CurveFile) -> Result<Self> {
        OverheadCurve::new(f.anchors)
    }
}

impl From<OverheadCurve> for CurveFile {
    fn from(c: OverheadCurve) -> Self {
        CurveFile { anchors: c.anchors }
    }
}

impl OverheadCurve {
    pub fn new(anchors: Vec<CurveAnchor>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("overhead curve needs at least one anchor"));
        }
        for a in &anchors {
            if !(a.skewness.is_finite() && a.alpha.is_finite() && a.beta.is_finite()) {
                return Err(Error::invalid("overhead curve parameters must be finite"));
            }
            if a.alpha < 0.0 {
                return Err(Error::invalid(format!(
                    "alpha must be >= 0, got {}",
                    a.alpha
                )));
            }
        }
        if anchors.windows(2).any(|w| w[1].skewness <= w[0].skewness) {
            return Err(Error::invalid(
                "anchors must be sorted by distinct skewness",
            ));
        }
        Ok(Self { anchors })
    }

    /// A curve that charges no overhead at any accuracy.
    pub fn zero() -> Self {
        Self {
            anchors: vec![CurveAnchor {
                skewness: 1.0,
                alpha: 0.0,
                beta: 0.0,
            }],
        }
    }

    pub fn anchors(&self) -> &[CurveAnchor] {
        &self.anchors
    }

    /// `(alpha, beta)` at skewness `s`.
    pub fn params_at(&self, s: f64) -> (f64, f64) {
        let first = self.anchors[0];
        let last = self.anchors[self.anchors.len() - 1];
        if s <= first.skewness {
            return (first.alpha, first.beta);
        }
        if s >= last.skewness {
            return (last.alpha, last.beta);
        }
        let i = self.anchors.partition_point(|a| a.skewness <= s);
        let (lo, hi) = (self.anchors[i - 1], self.anchors[i]);
        let w = (s - lo.skewness) / (hi.skewness - lo.skewness);
        (
            lo.alpha + w * (hi.alpha - lo.alpha),
            lo.beta + w * (hi.beta - lo.beta),
        )
    }

    pub fn overhead_fraction(&self, accuracy: f64, skewness: f64) -> f64 {
        let (alpha, beta) = self.params_at(skewness);
        alpha * (beta * accuracy).exp()
    }

    /// Adjacent anchors where the higher-skew one is not cheaper at every
    /// accuracy in [0.5, 1].
    pub fn monotonicity_warnings(&self) -> Vec<String> {
        self.anchors
            .windows(2)
            .filter_map(|w| {
                // Accuracies below 0.5 are never simulated.
                let bad = (50..=100)
                    .map(|i| i as f64 / 100.0)
                    .find(|&a| w[1].overhead(a) >= w[0].overhead(a) && w[0].overhead(a) > 0.0);
                bad.map(|a| {
                    format!(
                        "anchor at skewness {} is not cheaper than anchor at {} (accuracy {a:.2})",
                        w[1].skewness, w[0].skewness
                    )
                })
            })
            .collect()
    }

    /// Parses a calibration file, logging any monotonicity warnings.
    pub fn from_json(text: &str) -> Result<Self> {
        let curve: OverheadCurve = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("bad overhead curve: {e}")))?;
        for w in curve.monotonicity_warnings() {
            log::warn!("{w}");
        }
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{distribution_from_skewness, sample_trace, WorkloadConfig};

    fn trace(rows: &[u32], token_ids: Option<&[u32]>) -> ExpertTrace {
        let mut l = TraceLayer::from_experts(rows.iter().map(|&e| vec![e]).collect());
        l.token_ids = token_ids.map(<[u32]>::to_vec);
        l.positions = Some((0..rows.len() as u32).collect());
        ExpertTrace::new(4, vec![l]).unwrap()
    }

    struct Fixed(Vec<u32>);
    impl ExpertPredictor for Fixed {
        fn predict(&self, _: usize, _: &TraceLayer, _: usize) -> Result<&[u32]> {
            Ok(&self.0)
        }
    }

    /// Knows every routing of layer 0 in advance.
    struct Perfect(Vec<Vec<u32>>);
    impl Perfect {
        fn of(t: &ExpertTrace) -> Self {
            Perfect(t.layer(0).experts.clone())
        }
    }
    impl ExpertPredictor for Perfect {
        fn predict(&self, _: usize, _: &TraceLayer, t: usize) -> Result<&[u32]> {
            Ok(&self.0[t])
        }
    }

    #[test]
    fn probability_model_picks_argmax() {
        let t = trace(&[0, 0, 0, 1], None);
        let m = fit_probability_model(&t);
        assert_eq!(m.layer_prediction(0), &[0]);
        assert_eq!(evaluate_accuracy(&m, &t).unwrap(), 0.75);

        let tie = trace(&[2, 1, 0, 3], None);
        assert_eq!(fit_probability_model(&tie).layer_prediction(0), &[0]);
    }

    #[test]
    fn probability_accuracy_is_hot_expert_frequency() {
        let truth = distribution_from_skewness(4, 2.5).unwrap();
        let w = WorkloadConfig {
            batch_size: 1,
            seq_len: 5000,
            skewness: None,
        };
        let train = sample_trace(&truth, &w, 1, 1).unwrap();
        let test = sample_trace(&truth, &w, 1, 2).unwrap();
        let m = fit_probability_model(&train);
        assert_eq!(m.layer_prediction(0), &[0]);
        let freq = test.counts(0)[0] as f64 / test.token_count() as f64;
        assert_eq!(evaluate_accuracy(&m, &test).unwrap(), freq);
    }

    #[test]
    fn conditional_model_on_toy_vocabulary() {
        // Token A (id 10) always goes to expert 1, token B (id 20) to expert 2.
        let ids = [10, 20, 10, 10, 20, 10];
        let rows = [1, 2, 1, 1, 2, 1];
        let t = trace(&rows, Some(&ids));
        let cond = fit_conditional_model(&t, ConditionKey::TokenId).unwrap();
        assert_eq!(evaluate_accuracy(&cond, &t).unwrap(), 1.0);
        let global = fit_probability_model(&t);
        assert_eq!(evaluate_accuracy(&global, &t).unwrap(), 4.0 / 6.0);
    }

    #[test]
    fn conditional_model_collapses_with_single_key() {
        let rows = [3, 1, 3, 0, 3, 2];
        let t = trace(&rows, Some(&[7; 6]));
        let cond = fit_conditional_model(&t, ConditionKey::TokenId).unwrap();
        let global = fit_probability_model(&t);
        assert_eq!(
            evaluate_accuracy(&cond, &t).unwrap(),
            evaluate_accuracy(&global, &t).unwrap()
        );
    }

    #[test]
    fn unseen_key_falls_back_to_global() {
        let train = trace(&[1, 1, 1, 2], Some(&[5, 5, 6, 9]));
        let cond = fit_conditional_model(&train, ConditionKey::TokenId).unwrap();
        let test = trace(&[1, 2], Some(&[42, 9]));
        let r = test.layer(0);
        assert_eq!(cond.predict(0, r, 0).unwrap(), &[1]);
        assert_eq!(cond.predict(0, r, 1).unwrap(), &[2]);
    }

    #[test]
    fn conditional_requires_keys() {
        let t = trace(&[0, 1], None);
        assert!(fit_conditional_model(&t, ConditionKey::TokenId).is_err());
        assert!(fit_conditional_model(&t, ConditionKey::Position).is_ok());
    }

    #[test]
    fn accuracy_bounds() {
        let t = trace(&[0, 0, 0], None);
        assert_eq!(evaluate_accuracy(&Perfect::of(&t), &t).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&Fixed(vec![3]), &t).unwrap(), 0.0);
    }

    #[test]
    fn top_k_accuracy_counts_set_overlap() {
        let l = TraceLayer::from_experts(vec![vec![0, 1], vec![0, 2], vec![0, 1]]);
        let t = ExpertTrace::new(4, vec![l]).unwrap();
        let m = fit_probability_model(&t);
        assert_eq!(m.layer_prediction(0), &[0, 1]);
        assert!((evaluate_accuracy(&m, &t).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(evaluate_accuracy(&Perfect::of(&t), &t).unwrap(), 1.0);
    }

    fn curve() -> OverheadCurve {
        OverheadCurve::new(vec![
            CurveAnchor {
                skewness: 1.4,
                alpha: 1e-4,
                beta: 8.0,
            },
            CurveAnchor {
                skewness: 2.0,
                alpha: 3e-4,
                beta: 6.0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn overhead_examples() {
        let c = OverheadCurve::new(vec![CurveAnchor {
            skewness: 1.0,
            alpha: 1e-4,
            beta: 8.0,
        }])
        .unwrap();
        assert!((c.overhead_fraction(0.6, 1.0) - 0.012_151_041_751_873_485).abs() < 1e-15);
        assert!((c.overhead_fraction(0.6, 1.0) - 0.01216).abs() < 1e-5);

        let c = curve();
        assert_eq!(c.params_at(1.4), (1e-4, 8.0));
        assert_eq!(c.params_at(2.0), (3e-4, 6.0));
        let (a, b) = c.params_at(1.7);
        assert!((a - 2e-4).abs() < 1e-18 && (b - 7.0).abs() < 1e-12);
        assert_eq!(c.params_at(0.5), (1e-4, 8.0));
        assert_eq!(c.params_at(9.0), (3e-4, 6.0));
    }

    #[test]
    fn overhead_is_increasing_and_continuous() {
        let c = curve();
        for s in [1.0, 1.4, 1.55, 2.0, 3.0] {
            let mut prev = -1.0;
            for i in 0..=100 {
                let o = c.overhead_fraction(i as f64 / 100.0, s);
                assert!(o > prev);
                prev = o;
            }
        }
        let at = |s: f64| c.overhead_fraction(0.9, s);
        assert!((at(2.0 - 1e-9) - at(2.0)).abs() < 1e-9);
        assert!((at(1.4 + 1e-9) - at(1.4)).abs() < 1e-9);
    }

    #[test]
    fn curve_validation() {
        let a = |s, alpha| CurveAnchor {
            skewness: s,
            alpha,
            beta: 1.0,
        };
        assert!(OverheadCurve::new(vec![]).is_err());
        assert!(OverheadCurve::new(vec![a(1.0, -1.0)]).is_err());
        assert!(OverheadCurve::new(vec![a(2.0, 1.0), a(1.0, 1.0)]).is_err());
        assert!(OverheadCurve::new(vec![a(1.0, 1.0), a(1.0, 2.0)]).is_err());
        assert!(OverheadCurve::from_json(r#"{"anchors": []}"#).is_err());
        let ok =
            OverheadCurve::from_json(r#"{"anchors":[{"skewness":1.4,"alpha":1e-4,"beta":8}]}"#);
        assert!(ok.is_ok());
    }

    #[test]
    fn costlier_high_skew_anchor_warns() {
        // 3e-4 * e^{6a} exceeds 1e-4 * e^{8a} for small a.
        assert_eq!(curve().monotonicity_warnings().len(), 1);
        let good = OverheadCurve::new(vec![
            CurveAnchor {
                skewness: 1.4,
                alpha: 1e-4,
                beta: 8.0,
            },
            CurveAnchor {
                skewness: 2.0,
                alpha: 1e-4,
                beta: 7.0,
            },
        ])
        .unwrap();
        assert!(good.monotonicity_warnings().is_empty());
    }
}
