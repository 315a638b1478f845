use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{aggregate, attention_weights, decide, softmax, stack_sequence, PredictorDims, PredictorParams, Preprocess};
use crate::error::{FrzError, Result};

/// A history window (oldest snapshot first) and its freeze label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub sequence: Vec<Vec<f32>>,
    pub label: u8,
}

impl TrainRecord {
    pub fn refs(&self) -> Vec<&[f32]> {
        self.sequence.iter().map(Vec::as_slice).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-class loss weights; inverse class frequency when absent.
    pub class_weights: Option<[f64; 2]>,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub dims: PredictorDims,
    pub preprocess: Preprocess,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
            class_weights: None,
            seed: 0,
            holdout_fraction: 0.1,
            dims: PredictorDims::FULL,
            preprocess: Preprocess::None,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(FrzError::Config(format!("predictor lr must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FrzError::Config(format!("predictor momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(FrzError::Config("predictor batch_size must be ≥ 1".into()));
        }
        if let Some(w) = self.class_weights {
            if !(w[0] > 0.0 && w[1] > 0.0) {
                return Err(FrzError::Config(format!("class weights must be > 0, got {w:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(FrzError::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Accumulates the summed gradient of `records` into `grad` and returns the
/// summed class-weighted cross-entropy.
pub(crate) fn batch_grad(
    params: &PredictorParams,
    records: &[&TrainRecord],
    class_weights: [f64; 2],
    grad: &mut PredictorParams,
) -> Result<f64> {
    let d = params.dims.input;
    let e = params.dims.embed;
    let b = records.len();
    let mut x_all = Vec::new();
    let mut x_last = Vec::with_capacity(b * d);
    let mut spans = Vec::with_capacity(b);
    for r in records {
        let x = stack_sequence(params, &r.refs())?;
        let t = x.len() / d;
        spans.push((x_all.len() / d, t));
        x_last.extend_from_slice(&x[(t - 1) * d..]);
        x_all.extend(x);
    }
    let rows = x_all.len() / d;
    let (keys, key_tape) = params.key.forward_taped(&x_all, rows);
    let (values, value_tape) = params.value.forward_taped(&x_all, rows);
    let (queries, query_tape) = params.query.forward_taped(&x_last, b);

    let mut alphas = Vec::with_capacity(b);
    let mut contexts = Vec::with_capacity(b * e);
    for (i, &(start, t)) in spans.iter().enumerate() {
        let q = &queries[i * e..(i + 1) * e];
        let a = attention_weights(q, &keys[start * e..(start + t) * e], e);
        contexts.extend(aggregate(&a, &values[start * e..(start + t) * e], e));
        alphas.push(a);
    }
    let (logits, head_tape) = params.head.forward_taped(&contexts, b);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0f32; b * 2];
    for (i, r) in records.iter().enumerate() {
        let y = r.label as usize;
        let w = class_weights[y];
        let p = softmax(&[logits[2 * i] as f64, logits[2 * i + 1] as f64]);
        loss += -w * p[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..2 {
            dlogits[2 * i + c] = (w * (p[c] - (c == y) as u8 as f64)) as f32;
        }
    }
    let dcontext = params.head.backward(&head_tape, &dlogits, &mut grad.head, true).expect("input gradient requested");

    let mut dkeys = vec![0.0f32; rows * e];
    let mut dvalues = vec![0.0f32; rows * e];
    let mut dqueries = vec![0.0f32; b * e];
    for (i, &(start, t)) in spans.iter().enumerate() {
        let dc = &dcontext[i * e..(i + 1) * e];
        let a = &alphas[i];
        let q = &queries[i * e..(i + 1) * e];
        let dalpha: Vec<f64> = (0..t)
            .map(|j| {
                let v = &values[(start + j) * e..(start + j + 1) * e];
                dc.iter().zip(v).map(|(&g, &vv)| g as f64 * vv as f64).sum()
            })
            .collect();
        let mean: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
        for j in 0..t {
            let row = start + j;
            let dscore = a[j] * (dalpha[j] - mean);
            let k = &keys[row * e..(row + 1) * e];
            for c in 0..e {
                dvalues[row * e + c] = (a[j] * dc[c] as f64) as f32;
                dkeys[row * e + c] = (dscore * q[c] as f64) as f32;
                dqueries[i * e + c] += (dscore * k[c] as f64) as f32;
            }
        }
    }
    params.key.backward(&key_tape, &dkeys, &mut grad.key, false);
    params.value.backward(&value_tape, &dvalues, &mut grad.value, false);
    params.query.backward(&query_tape, &dqueries, &mut grad.query, false);
    Ok(loss)
}

/// Class-weighted cross-entropy of one record and its gradient over all
/// four perceptrons.
pub fn predictor_grad(params: &PredictorParams, record: &TrainRecord, class_weights: [f64; 2]) -> Result<(f64, PredictorParams)> {
    let mut grad = params.zeros_like();
    let loss = batch_grad(params, &[record], class_weights, &mut grad)?;
    Ok((loss, grad))
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[u8], labels: &[u8]) -> f64 {
    let mut hit = [0usize; 2];
    let mut count = [0usize; 2];
    for (&p, &y) in predictions.iter().zip(labels) {
        count[y as usize] += 1;
        hit[y as usize] += (p == y) as usize;
    }
    let recalls: Vec<f64> = (0..2).filter(|&c| count[c] > 0).map(|c| hit[c] as f64 / count[c] as f64).collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PredictorParams,
    pub best_epoch: usize,
    pub best_holdout_balanced_accuracy: f64,
    pub class_weights: [f64; 2],
    pub history: Vec<EpochStats>,
    pub train_size: usize,
    pub holdout_size: usize,
}

fn canonical_cmp(a: &TrainRecord, b: &TrainRecord) -> std::cmp::Ordering {
    a.label
        .cmp(&b.label)
        .then(a.sequence.len().cmp(&b.sequence.len()))
        .then_with(|| {
            let bits = |r: &TrainRecord| r.sequence.iter().flatten().map(|v| v.to_bits()).collect::<Vec<u32>>();
            bits(a).cmp(&bits(b))
        })
}

/// Offline SGD-with-momentum training. Records are put in a canonical order
/// first, so the result depends only on the record multiset and the seed.
/// Returns the parameters of the epoch with the best held-out balanced
/// accuracy (the first such epoch on ties).
pub fn train_predictor(dataset: &[TrainRecord], cfg: &PredictorTrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let min_len = if cfg.preprocess.uses_previous() { 2 } else { 1 };
    for r in dataset {
        if r.sequence.len() < min_len || r.label > 1 {
            return Err(FrzError::Dataset(format!("records need at least {min_len} snapshots and a 0/1 label")));
        }
    }
    let mut order: Vec<&TrainRecord> = dataset.iter().collect();
    order.sort_by(|a, b| canonical_cmp(a, b));
    let mut by_class: [Vec<&TrainRecord>; 2] = [Vec::new(), Vec::new()];
    for r in order {
        by_class[r.label as usize].push(r);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(FrzError::Dataset(format!(
            "predictor training needs both labels (got {} zeros, {} ones)",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for class in by_class.iter_mut() {
        class.shuffle(&mut rng);
        let n = class.len();
        let k = if n >= 2 { ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(usize::from(cfg.holdout_fraction > 0.0), n - 1) } else { 0 };
        holdout.extend(class.drain(..k));
        train.append(class);
    }
    let n1 = train.iter().filter(|r| r.label == 1).count();
    let n0 = train.len() - n1;
    let class_weights = cfg.class_weights.unwrap_or_else(|| {
        let n = train.len() as f64;
        [n / (2.0 * n0.max(1) as f64), n / (2.0 * n1.max(1) as f64)]
    });
    let eval_set: Vec<&TrainRecord> = if holdout.is_empty() { train.clone() } else { holdout.clone() };
    let evaluate = |p: &PredictorParams| -> Result<f64> {
        let mut preds = Vec::with_capacity(eval_set.len());
        for r in eval_set.iter() {
            preds.push(decide(p, &r.refs())?.decision);
        }
        let labels: Vec<u8> = eval_set.iter().map(|r| r.label).collect();
        Ok(balanced_accuracy(&preds, &labels))
    };

    let mut params = PredictorParams::init(cfg.dims, cfg.preprocess, cfg.seed);
    let mut velocity = params.zeros_like();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_bacc = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let (lr, mu) = (cfg.lr as f32, cfg.momentum as f32);
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train.chunks(cfg.batch_size) {
            let mut grad = params.zeros_like();
            epoch_loss += batch_grad(&params, chunk, class_weights, &mut grad)?;
            let scale = 1.0 / chunk.len() as f32;
            for ((p, v), g) in params.mlps_mut().into_iter().zip(velocity.mlps_mut()).zip(grad.mlps()) {
                for ((pt, vt), gt) in p.params_mut().zip(v.params_mut()).zip(g.params()) {
                    for ((w, m), &gi) in pt.iter_mut().zip(vt.iter_mut()).zip(gt) {
                        *m = mu * *m + gi * scale;
                        *w -= lr * *m;
                    }
                }
            }
        }
        let bacc = evaluate(&params)?;
        history.push(EpochStats { epoch, train_loss: epoch_loss / train.len() as f64, holdout_balanced_accuracy: bacc });
        if bacc > best_bacc {
            best_bacc = bacc;
            best_epoch = epoch;
            best = params.clone();
        }
    }
    if cfg.epochs == 0 {
        best_bacc = evaluate(&best)?;
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        best_holdout_balanced_accuracy: best_bacc,
        class_weights,
        history,
        train_size: train.len(),
        holdout_size: holdout.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: PredictorDims = PredictorDims { input: 16, hidden: 8, embed: 4, head_hidden: 3 };

    fn record(label: u8, seed: u64) -> TrainRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let t = 1 + (seed % 4) as usize;
        TrainRecord { sequence: (0..t).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(), label }
    }

    #[test]
    fn class_weight_scales_loss_linearly() {
        let p = PredictorParams::init(SMALL, Preprocess::None, 2);
        let r = record(1, 5);
        let (l1, _) = predictor_grad(&p, &r, [1.0, 1.0]).unwrap();
        let (l2, _) = predictor_grad(&p, &r, [1.0, 2.0]).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-9 * l1.abs().max(1.0));
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let mut p = PredictorParams::init(SMALL, Preprocess::None, 2);
        p.head.layers[2].weight.fill(0.0);
        p.head.layers[2].bias = vec![-40.0, 40.0];
        let (loss, g) = predictor_grad(&p, &record(1, 9), [1.0, 1.0]).unwrap();
        assert!(loss < 1e-12);
        let max = g.mlps().iter().flat_map(|m| m.params()).flatten().fold(0.0f32, |a, &b| a.max(b.abs()));
        assert!(max < 1e-12, "{max}");
    }

    #[test]
    fn single_class_dataset_rejected() {
        let data: Vec<_> = (0..4).map(|s| record(0, s)).collect();
        let cfg = PredictorTrainConfig { dims: SMALL, epochs: 1, ..Default::default() };
        assert!(matches!(train_predictor(&data, &cfg), Err(FrzError::Dataset(_))));
    }

    #[test]
    fn zero_lr_returns_initialisation() {
        let data: Vec<_> = (0..10).map(|s| record((s % 2) as u8, s)).collect();
        let cfg = PredictorTrainConfig { dims: SMALL, epochs: 2, lr: 0.0, seed: 4, ..Default::default() };
        let out = train_predictor(&data, &cfg).unwrap();
        assert_eq!(out.params, PredictorParams::init(SMALL, Preprocess::None, 4));
    }

    #[test]
    fn input_order_does_not_matter() {
        let data: Vec<_> = (0..20).map(|s| record((s % 3 == 0) as u8, s)).collect();
        let mut rev = data.clone();
        rev.reverse();
        let cfg = PredictorTrainConfig { dims: SMALL, epochs: 3, seed: 1, ..Default::default() };
        let a = train_predictor(&data, &cfg).unwrap();
        let b = train_predictor(&rev, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn balanced_accuracy_averages_recalls() {
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 1]), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1]), 0.5);
    }
}
