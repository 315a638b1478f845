//! Layer tailoring (fixed-size weight subsampling) and per-unit history
//! windows of tailored snapshots.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};
use crate::nn::{FreezeMask, NetworkState};

pub const DEFAULT_TAILORED_SIZE: usize = 1024;
pub const DEFAULT_WINDOW: usize = 30;

/// Fixed flat indices into each unit's primary weight tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailorPlan {
    pub tailored_size: usize,
    pub seed: u64,
    pub indices: BTreeMap<usize, Vec<usize>>,
}

/// Samples `tailored_size` distinct weight positions per unit (sorted).
/// Units with fewer weights use every position once, then cycle that list
/// until the uniform length is reached.
pub fn make_plan(state: &NetworkState, tailored_size: usize, seed: u64) -> Result<TailorPlan> {
    if tailored_size == 0 {
        return Err(FrzError::Config("tailored_size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = BTreeMap::new();
    for unit in &state.units {
        let n = unit.weight().len();
        let picked = if n > tailored_size {
            let mut v = rand::seq::index::sample(&mut rng, n, tailored_size).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).cycle().take(tailored_size).collect()
        };
        indices.insert(unit.unit_id, picked);
    }
    Ok(TailorPlan { tailored_size, seed, indices })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub unit_id: usize,
    /// Iteration at which the weights were read.
    pub timestamp: u64,
    pub values: Vec<f32>,
}

/// Tailored weights of every active unit at iteration `t`.
pub fn snapshot(state: &NetworkState, plan: &TailorPlan, mask: &FreezeMask, t: u64) -> Result<Vec<WeightSnapshot>> {
    let mut out = Vec::new();
    for unit in state.units.iter().filter(|u| !mask.is_frozen(u.unit_id)) {
        let idx = plan
            .indices
            .get(&unit.unit_id)
            .ok_or_else(|| FrzError::Contract(format!("tailor plan has no entry for unit {}", unit.unit_id)))?;
        let w = unit.weight();
        let values = idx
            .iter()
            .map(|&i| w.get(i).copied().ok_or_else(|| FrzError::Contract(format!("plan index {i} out of bounds"))))
            .collect::<Result<Vec<f32>>>()?;
        out.push(WeightSnapshot { unit_id: unit.unit_id, timestamp: t, values });
    }
    Ok(out)
}

/// Ring of the most recent `window` snapshots per active unit.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    window: usize,
    tailored_size: usize,
    buffers: BTreeMap<usize, VecDeque<WeightSnapshot>>,
}

impl HistoryBuffer {
    pub fn new(window: usize, tailored_size: usize) -> Self {
        HistoryBuffer { window, tailored_size, buffers: BTreeMap::new() }
    }

    pub fn window_size(&self) -> usize {
        self.window
    }

    pub fn push(&mut self, snapshots: Vec<WeightSnapshot>) -> Result<()> {
        for s in &snapshots {
            if s.values.len() != self.tailored_size {
                return Err(FrzError::Contract(format!(
                    "snapshot of unit {} has {} values, expected {}",
                    s.unit_id,
                    s.values.len(),
                    self.tailored_size
                )));
            }
            if let Some(last) = self.buffers.get(&s.unit_id).and_then(|b| b.back()) {
                if s.timestamp <= last.timestamp {
                    return Err(FrzError::Contract(format!(
                        "snapshot at {} for unit {} is not after {}",
                        s.timestamp, s.unit_id, last.timestamp
                    )));
                }
            }
        }
        for s in snapshots {
            let buf = self.buffers.entry(s.unit_id).or_default();
            if buf.len() == self.window {
                buf.pop_front();
            }
            buf.push_back(s);
        }
        Ok(())
    }

    /// Up to `window` snapshots of `unit`, oldest first.
    pub fn window(&self, unit: usize) -> Vec<&WeightSnapshot> {
        self.buffers.get(&unit).map(|b| b.iter().collect()).unwrap_or_default()
    }

    pub fn len(&self, unit: usize) -> usize {
        self.buffers.get(&unit).map_or(0, VecDeque::len)
    }

    /// Drops the history of a frozen unit.
    pub fn release(&mut self, unit: usize) {
        self.buffers.remove(&unit);
    }

    pub fn units(&self) -> impl Iterator<Item = usize> + '_ {
        self.buffers.keys().copied()
    }

    /// Bytes held by stored snapshot values.
    pub fn bytes(&self) -> usize {
        self.buffers.values().map(|b| b.len() * self.tailored_size * 4).sum()
    }
}

/// Total-variation distance between the normalised histograms of `a` and `b`
/// over `bins` equal-width bins spanning both samples.
pub fn histogram_tv(a: &[f32], b: &[f32], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(FrzError::Config(format!("need at least 2 bins, got {bins}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(FrzError::Degenerate("histogram of an empty sample".into()));
    }
    let (lo, hi) = a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if !(hi > lo) {
        return Ok(0.0);
    }
    let hist = |xs: &[f32]| {
        let mut h = vec![0.0f64; bins];
        for &v in xs {
            let pos = ((v as f64 - lo) / (hi - lo) * bins as f64) as usize;
            h[pos.min(bins - 1)] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>())
}

/// How far the gradient histogram of the tailored subset is from that of
/// the whole tensor.
pub fn grad_subset_divergence(full_grads: &[f32], indices: &[usize], bins: usize) -> Result<f64> {
    if full_grads.is_empty() {
        return Err(FrzError::Degenerate("empty gradient tensor".into()));
    }
    let subset = indices
        .iter()
        .map(|&i| full_grads.get(i).copied().ok_or_else(|| FrzError::Contract(format!("index {i} out of bounds"))))
        .collect::<Result<Vec<f32>>>()?;
    histogram_tv(full_grads, &subset, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, NetworkSpec};

    fn net(dims: &[usize]) -> NetworkState {
        let spec = NetworkSpec::mlp(dims);
        build_network(&spec, &spec.default_units(), 5).unwrap()
    }

    #[test]
    fn exact_size_takes_every_index() {
        let s = net(&[32, 32]);
        let p = make_plan(&s, 1024, 1).unwrap();
        assert_eq!(p.indices[&0], (0..1024).collect::<Vec<_>>());
    }

    #[test]
    fn small_unit_cycles_its_indices() {
        let s = net(&[50, 10]);
        let p = make_plan(&s, 1024, 1).unwrap();
        let idx = &p.indices[&0];
        assert_eq!(idx.len(), 1024);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(i, k % 500);
        }
    }

    #[test]
    fn large_unit_is_sorted_unique_and_deterministic() {
        let s = net(&[64, 64, 3]);
        let a = make_plan(&s, 1024, 9).unwrap();
        let b = make_plan(&s, 1024, 9).unwrap();
        assert_eq!(a, b);
        let idx = &a.indices[&0];
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(*idx.last().unwrap() < 4096);
    }

    #[test]
    fn snapshots_skip_frozen_units_and_read_plan_positions() {
        let s = net(&[40, 30, 3]);
        let p = make_plan(&s, 16, 2).unwrap();
        let mask = FreezeMask::empty(2).with_frozen(&[1], 0).unwrap();
        let snaps = snapshot(&s, &p, &mask, 3).unwrap();
        assert_eq!(snaps.len(), 1);
        let want: Vec<f32> = p.indices[&0].iter().map(|&i| s.units[0].weight()[i]).collect();
        assert_eq!(snaps[0].values, want);
    }

    #[test]
    fn ring_keeps_most_recent_window() {
        let mut h = HistoryBuffer::new(30, 2);
        for t in 0..35 {
            h.push(vec![WeightSnapshot { unit_id: 0, timestamp: t, values: vec![t as f32, 0.0] }]).unwrap();
        }
        let w = h.window(0);
        assert_eq!(w.len(), 30);
        assert_eq!(w[0].timestamp, 5);
        assert_eq!(w[29].timestamp, 34);
        let stale = WeightSnapshot { unit_id: 0, timestamp: 34, values: vec![0.0, 0.0] };
        assert!(matches!(h.push(vec![stale]), Err(FrzError::Contract(_))));
    }

    #[test]
    fn tv_bounds() {
        let a: Vec<f32> = (0..100).map(|i| i as f32 / 100.0).collect();
        assert_eq!(grad_subset_divergence(&a, &(0..100).collect::<Vec<_>>(), 10).unwrap(), 0.0);
        let lo = vec![0.0f32; 10];
        let hi = vec![1.0f32; 10];
        assert!((histogram_tv(&lo, &hi, 10).unwrap() - 1.0).abs() < 1e-12);
        assert!(grad_subset_divergence(&[], &[], 10).is_err());
    }
}
