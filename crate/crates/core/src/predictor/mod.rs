//! Single-head attention freeze predictor.
//!
//! Every snapshot in a unit's history is encoded by three perceptrons into a
//! key, query and value. The query of the newest snapshot is dotted with
//! every key, the scores are softmax-normalised into attention weights, and
//! the weighted sum of values (the context) is classified by a fourth
//! perceptron into *continue* (0) or *freeze* (1).

pub mod io;
mod mlp;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load, load_expecting, save, PREDICTOR_KIND};
pub use mlp::{Linear, Mlp};
pub use train::{balanced_accuracy, EpochStats, TrainOutcome, predictor_grad, train_predictor, PredictorTrainConfig, TrainRecord};

use crate::error::{FrzError, Result};
use crate::linalg::dot;

/// Layer widths. Each perceptron has three linear layers:
/// encoders `input → hidden → hidden → embed`, head
/// `embed → head_hidden → head_hidden → 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub head_hidden: usize,
}

impl PredictorDims {
    pub const FULL: PredictorDims = PredictorDims { input: 1024, hidden: 256, embed: 64, head_hidden: 32 };

    fn encoder(&self) -> [usize; 4] {
        [self.input, self.hidden, self.hidden, self.embed]
    }

    fn head(&self) -> [usize; 4] {
        [self.embed, self.head_hidden, self.head_hidden, 2]
    }
}

/// Input transform applied to each snapshot before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Raw tailored weights.
    #[default]
    None,
    /// Subtract the snapshot's mean and divide by its standard deviation.
    /// Per-snapshot, so an encoding never depends on the rest of the window.
    Standardize,
    /// Change since the previous snapshot divided by the current snapshot's
    /// standard deviation. The oldest snapshot of a window only serves as
    /// the base of the first difference, so `T` snapshots give `T − 1` rows.
    Delta,
}

impl Preprocess {
    /// Whether each row also depends on the preceding snapshot.
    pub fn uses_previous(self) -> bool {
        self == Preprocess::Delta
    }

    /// Encoded rows for a window of `snapshots`.
    pub fn rows(self, snapshots: usize) -> usize {
        if self.uses_previous() {
            snapshots.saturating_sub(1)
        } else {
            snapshots
        }
    }

    fn apply(self, prev: Option<&[f32]>, cur: &[f32]) -> Vec<f32> {
        match self {
            Preprocess::None => cur.to_vec(),
            Preprocess::Standardize => {
                let mut x = cur.to_vec();
                let (mean, scale) = moments(cur);
                x.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * scale) as f32);
                x
            }
            Preprocess::Delta => {
                let prev = prev.expect("delta rows need a previous snapshot");
                let (_, scale) = moments(cur);
                cur.iter().zip(prev).map(|(&c, &p)| ((c as f64 - p as f64) * scale) as f32).collect()
            }
        }
    }
}

/// Mean and inverse standard deviation (1 for constant input).
fn moments(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub dims: PredictorDims,
    pub preprocess: Preprocess,
    pub key: Mlp,
    pub query: Mlp,
    pub value: Mlp,
    pub head: Mlp,
}

impl PredictorParams {
    pub fn init(dims: PredictorDims, preprocess: Preprocess, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictorParams {
            dims,
            preprocess,
            key: Mlp::kaiming(&dims.encoder(), &mut rng),
            query: Mlp::kaiming(&dims.encoder(), &mut rng),
            value: Mlp::kaiming(&dims.encoder(), &mut rng),
            head: Mlp::kaiming(&dims.head(), &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PredictorParams {
            dims: self.dims,
            preprocess: self.preprocess,
            key: self.key.zeros_like(),
            query: self.query.zeros_like(),
            value: self.value.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn mlps(&self) -> [&Mlp; 4] {
        [&self.key, &self.query, &self.value, &self.head]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.key, &mut self.query, &mut self.value, &mut self.head]
    }

    pub fn param_count(&self) -> usize {
        self.mlps().iter().flat_map(|m| m.params()).map(Vec::len).sum()
    }
}

/// Key, query and value of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub key: Vec<f32>,
    pub query: Vec<f32>,
    pub value: Vec<f32>,
}

/// Full observable output of one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTrace {
    pub alphas: Vec<f64>,
    pub context: Vec<f32>,
    pub confidence: [f64; 2],
    pub decision: u8,
    /// FLOPs spent producing this decision.
    pub flops: u64,
}

fn check_len(params: &PredictorParams, snapshot: &[f32]) -> Result<()> {
    if snapshot.len() != params.dims.input {
        return Err(FrzError::Contract(format!(
            "snapshot has {} values, predictor expects {}",
            snapshot.len(),
            params.dims.input
        )));
    }
    Ok(())
}

/// Encoding of `snapshot`; `prev` must be given exactly when the
/// preprocessing uses the previous snapshot.
pub fn encode_pair(params: &PredictorParams, prev: Option<&[f32]>, snapshot: &[f32]) -> Result<Encoding> {
    check_len(params, snapshot)?;
    if let Some(p) = prev {
        check_len(params, p)?;
    }
    if params.preprocess.uses_previous() != prev.is_some() {
        return Err(FrzError::Contract(format!("{:?} preprocessing and previous snapshot disagree", params.preprocess)));
    }
    let x = params.preprocess.apply(prev, snapshot);
    Ok(Encoding { key: params.key.forward(&x, 1), query: params.query.forward(&x, 1), value: params.value.forward(&x, 1) })
}

/// Encoding of a single snapshot for preprocessing that looks at one
/// snapshot at a time.
pub fn encode(params: &PredictorParams, snapshot: &[f32]) -> Result<Encoding> {
    encode_pair(params, None, snapshot)
}

/// FLOPs of one [`encode_pair`].
pub fn encode_flops(dims: &PredictorDims) -> u64 {
    3 * dims.encoder().windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum::<u64>()
}

fn check_sequence(params: &PredictorParams, sequence: &[&[f32]]) -> Result<()> {
    let need = if params.preprocess.uses_previous() { 2 } else { 1 };
    if sequence.len() < need {
        return Err(FrzError::Contract(format!("attention needs at least {need} snapshots, got {}", sequence.len())));
    }
    sequence.iter().try_for_each(|s| check_len(params, s))
}

/// Row-major `rows × input` matrix of the preprocessed sequence.
pub(crate) fn stack_sequence(params: &PredictorParams, sequence: &[&[f32]]) -> Result<Vec<f32>> {
    check_sequence(params, sequence)?;
    let skip = params.preprocess.uses_previous() as usize;
    Ok((skip..sequence.len())
        .flat_map(|j| params.preprocess.apply(if skip == 1 { Some(sequence[j - 1]) } else { None }, sequence[j]))
        .collect())
}

/// Numerically stable softmax in f64.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Scores of the newest query against every key, normalised by softmax.
pub(crate) fn attention_weights(query: &[f32], keys: &[f32], embed: usize) -> Vec<f64> {
    let scores: Vec<f64> = keys.chunks(embed).map(|k| dot(query, k) as f64).collect();
    softmax(&scores)
}

pub(crate) fn aggregate(alphas: &[f64], values: &[f32], embed: usize) -> Vec<f32> {
    let mut c = vec![0.0f64; embed];
    for (a, v) in alphas.iter().zip(values.chunks(embed)) {
        c.iter_mut().zip(v).for_each(|(ci, &vi)| *ci += a * vi as f64);
    }
    c.into_iter().map(|v| v as f32).collect()
}

fn encode_all(params: &PredictorParams, sequence: &[&[f32]]) -> Result<Vec<Encoding>> {
    check_sequence(params, sequence)?;
    if params.preprocess.uses_previous() {
        sequence.windows(2).map(|w| encode_pair(params, Some(w[0]), w[1])).collect()
    } else {
        sequence.iter().map(|s| encode(params, s)).collect()
    }
}

fn attend_encoded(params: &PredictorParams, encodings: &[&Encoding]) -> Result<(Vec<f64>, Vec<f32>)> {
    let e = params.dims.embed;
    let newest = encodings.last().ok_or_else(|| FrzError::Contract("attention over an empty sequence".into()))?;
    let keys: Vec<f32> = encodings.iter().flat_map(|c| c.key.iter().copied()).collect();
    let values: Vec<f32> = encodings.iter().flat_map(|c| c.value.iter().copied()).collect();
    let alphas = attention_weights(&newest.query, &keys, e);
    let context = aggregate(&alphas, &values, e);
    Ok((alphas, context))
}

/// Attention weights over `sequence` (oldest first) and the context vector.
pub fn attend(params: &PredictorParams, sequence: &[&[f32]]) -> Result<(Vec<f64>, Vec<f32>)> {
    let enc = encode_all(params, sequence)?;
    attend_encoded(params, &enc.iter().collect::<Vec<_>>())
}

/// Decision from already encoded snapshots. The reported FLOPs cover
/// scoring, aggregation and the head only.
pub fn decide_encoded(params: &PredictorParams, encodings: &[&Encoding]) -> Result<DecisionTrace> {
    let (alphas, context) = attend_encoded(params, encodings)?;
    let logits = params.head.forward(&context, 1);
    let p = softmax(&[logits[0] as f64, logits[1] as f64]);
    let confidence = [p[0], p[1]];
    let decision = (confidence[1] > confidence[0]) as u8;
    let flops = 4 * (encodings.len() * params.dims.embed) as u64 + params.head.flops(1);
    Ok(DecisionTrace { alphas, context, confidence, decision, flops })
}

/// Freeze decision for the unit whose history is `sequence`. Ties in the
/// confidence vote go to *continue*.
pub fn decide(params: &PredictorParams, sequence: &[&[f32]]) -> Result<DecisionTrace> {
    let enc = encode_all(params, sequence)?;
    let mut trace = decide_encoded(params, &enc.iter().collect::<Vec<_>>())?;
    trace.flops += enc.len() as u64 * encode_flops(&params.dims);
    Ok(trace)
}

/// FLOPs of one decision over `t` encoded rows: encoding every timestamp,
/// scoring, aggregation and the head.
pub fn inference_flops(dims: &PredictorDims, t: usize) -> u64 {
    let head: u64 = dims.head().windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum();
    encode_flops(dims) * t as u64 + 4 * (t * dims.embed) as u64 + head
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: PredictorDims = PredictorDims { input: 16, hidden: 8, embed: 4, head_hidden: 3 };

    fn zero_params() -> PredictorParams {
        let mut p = PredictorParams::init(SMALL, Preprocess::None, 0);
        for m in p.mlps_mut() {
            for t in m.params_mut() {
                t.fill(0.0);
            }
        }
        p
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let p = zero_params();
        let c = encode(&p, &[0.0; 16]).unwrap();
        assert!(c.key.iter().chain(&c.query).chain(&c.value).all(|&x| x == 0.0));
        assert!(encode(&p, &[0.0; 15]).is_err());
    }

    #[test]
    fn single_snapshot_attends_to_itself() {
        let p = PredictorParams::init(SMALL, Preprocess::None, 3);
        let s: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
        let (alphas, context) = attend(&p, &[&s]).unwrap();
        assert_eq!(alphas, vec![1.0]);
        assert_eq!(context, encode(&p, &s).unwrap().value);
        assert!(attend(&p, &[]).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut p = PredictorParams::init(SMALL, Preprocess::None, 3);
        // Zero the first key layer so every snapshot maps to the same key.
        p.key.layers[0].weight.fill(0.0);
        let seq: Vec<Vec<f32>> = (0..4).map(|j| (0..16).map(|i| (i * j) as f32 * 0.05).collect()).collect();
        let refs: Vec<&[f32]> = seq.iter().map(Vec::as_slice).collect();
        let (alphas, _) = attend(&p, &refs).unwrap();
        for a in alphas {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_scores_softmax_by_hand() {
        let alphas = softmax(&[1.0, 2.0]);
        let e = std::f64::consts::E;
        assert!((alphas[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((alphas[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((alphas[0] - 0.2689).abs() < 1e-4);
        let c = aggregate(&alphas, &[1.0, 0.0, 3.0, 2.0], 2);
        assert!((c[0] as f64 - (alphas[0] + 3.0 * alphas[1])).abs() < 1e-6);
        assert!((c[1] as f64 - 2.0 * alphas[1]).abs() < 1e-6);
    }

    #[test]
    fn decision_follows_confidence_with_tie_to_continue() {
        let mut p = zero_params();
        let s = vec![0.0f32; 16];
        assert_eq!(decide(&p, &[&s]).unwrap().decision, 0);
        let bias = &mut p.head.layers[2].bias;
        bias[0] = 0.9f32.ln();
        bias[1] = 0.1f32.ln();
        let t = decide(&p, &[&s]).unwrap();
        assert!((t.confidence[0] - 0.9).abs() < 1e-6);
        assert_eq!(t.decision, 0);
        let bias = &mut p.head.layers[2].bias;
        bias.swap(0, 1);
        assert_eq!(decide(&p, &[&s]).unwrap().decision, 1);
    }

    #[test]
    fn counted_flops_match_closed_form() {
        let p = PredictorParams::init(SMALL, Preprocess::None, 1);
        let seq: Vec<Vec<f32>> = (0..5).map(|j| vec![j as f32; 16]).collect();
        let refs: Vec<&[f32]> = seq.iter().map(Vec::as_slice).collect();
        assert_eq!(decide(&p, &refs).unwrap().flops, inference_flops(&SMALL, 5));
    }

    #[test]
    fn delta_drops_the_base_snapshot() {
        let p = PredictorParams::init(SMALL, Preprocess::Delta, 1);
        let a: Vec<f32> = (0..16).map(|i| (i as f32).cos()).collect();
        let b: Vec<f32> = a.iter().map(|v| v + 0.01).collect();
        assert!(decide(&p, &[&a]).is_err());
        let t = decide(&p, &[&a, &b, &b]).unwrap();
        assert_eq!(t.alphas.len(), 2);
        assert_eq!(t.flops, inference_flops(&SMALL, 2));
        // Doubling the scale of both snapshots leaves normalised differences unchanged.
        let a2: Vec<f32> = a.iter().map(|v| 2.0 * v).collect();
        let b2: Vec<f32> = b.iter().map(|v| 2.0 * v).collect();
        let t2 = decide(&p, &[&a2, &b2, &b2]).unwrap();
        assert!((t.confidence[0] - t2.confidence[0]).abs() < 1e-5);
        assert!(encode(&p, &a).is_err());
    }

    #[test]
    fn standardize_is_scale_free() {
        let p = PredictorParams::init(SMALL, Preprocess::Standardize, 1);
        let a: Vec<f32> = (0..16).map(|i| (i as f32).sin()).collect();
        let b: Vec<f32> = a.iter().map(|v| 3.0 * v + 1.0).collect();
        let c: Vec<f32> = a.iter().map(|v| 0.5 * v - 2.0).collect();
        let ta = decide(&p, &[&a, &a]).unwrap();
        let tb = decide(&p, &[&b, &c]).unwrap();
        assert!((ta.confidence[0] - tb.confidence[0]).abs() < 1e-5);
    }
}
