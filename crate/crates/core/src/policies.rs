//! Freezing policies. Every policy only ever grows the freeze mask.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};
use crate::nn::{FreezeMask, Gradients};
use crate::predictor::{decide_encoded, encode_flops, encode_pair, DecisionTrace, Encoding, PredictorParams};
use crate::tailor::HistoryBuffer;

const RATE_EPS: f64 = 1e-12;

/// Layer-wise cosine annealing: unit `i`'s rate reaches zero at `t_i`, the
/// zero times being evenly spaced from `t0·total` to `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFreezeConfig {
    pub t0: f64,
    pub total_iterations: u64,
    pub base_lr: Vec<f64>,
}

impl LinearFreezeConfig {
    pub fn new(t0: f64, total_iterations: u64, base_lr: Vec<f64>) -> Result<Self> {
        let cfg = LinearFreezeConfig { t0, total_iterations, base_lr };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(FrzError::Config(format!("linear t0 must lie in (0, 1], got {}", self.t0)));
        }
        if self.base_lr.is_empty() {
            return Err(FrzError::Config("linear freezing needs at least one unit".into()));
        }
        if self.total_iterations == 0 {
            return Err(FrzError::Config("linear freezing needs total_iterations ≥ 1".into()));
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.base_lr.len()
    }

    pub fn zero_time(&self, unit: usize) -> f64 {
        let total = self.total_iterations as f64;
        let n = self.num_units();
        if n == 1 {
            return self.t0 * total;
        }
        self.t0 * total + unit as f64 * (1.0 - self.t0) * total / (n - 1) as f64
    }

    /// First integer iteration at or after `t_i`.
    pub fn freeze_iteration(&self, unit: usize) -> u64 {
        self.zero_time(unit).ceil() as u64
    }
}

pub fn linear_lr(cfg: &LinearFreezeConfig, unit: usize, t: f64) -> f64 {
    let ti = cfg.zero_time(unit);
    if t >= ti {
        return 0.0;
    }
    0.5 * cfg.base_lr[unit] * (1.0 + (PI * t / ti).cos())
}

/// `{ i : t ≥ t_i }`, each unit stamped with its first integer iteration past `t_i`.
pub fn linear_decide(cfg: &LinearFreezeConfig, t: u64) -> FreezeMask {
    let mut mask = FreezeMask::empty(cfg.num_units());
    for i in 0..cfg.num_units() {
        if t as f64 >= cfg.zero_time(i) {
            mask = mask.with_frozen(&[i], cfg.freeze_iteration(i)).expect("zero times are nondecreasing");
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradNormConfig {
    /// Evaluations per epoch.
    pub intervals_per_epoch: usize,
    /// Fraction of the active units counted as slowest-changing.
    pub percentile: f64,
}

impl Default for GradNormConfig {
    fn default() -> Self {
        GradNormConfig { intervals_per_epoch: 4, percentile: 0.5 }
    }
}

impl GradNormConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intervals_per_epoch == 0 {
            return Err(FrzError::Config("gradnorm intervals_per_epoch must be ≥ 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(FrzError::Config(format!("gradnorm percentile must lie in (0, 1), got {}", self.percentile)));
        }
        Ok(())
    }
}

/// Gradient-norm bookkeeping. Between evaluations the per-iteration norms of
/// each active unit are averaged; each evaluation appends that mean.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradNormState {
    pub history: BTreeMap<usize, Vec<f64>>,
    pending: BTreeMap<usize, (f64, u64)>,
}

impl GradNormState {
    pub fn record(&mut self, grads: &Gradients) {
        for &u in grads.units.keys() {
            let e = self.pending.entry(u).or_insert((0.0, 0));
            e.0 += grads.unit_norm(u).unwrap();
            e.1 += 1;
        }
    }

    pub fn close_interval(&mut self) {
        for (u, (sum, n)) in std::mem::take(&mut self.pending) {
            self.history.entry(u).or_default().push(sum / n as f64);
        }
    }

    pub fn push_norm(&mut self, unit: usize, norm: f64) {
        self.history.entry(unit).or_default().push(norm);
    }

    /// `|now − prev| / max(prev, ε)` from the last two evaluations.
    pub fn change_rate(&self, unit: usize) -> Option<f64> {
        let h = self.history.get(&unit)?;
        if h.len() < 2 {
            return None;
        }
        let (prev, now) = (h[h.len() - 2], h[h.len() - 1]);
        Some((now - prev).abs() / prev.max(RATE_EPS))
    }
}

/// Units to add: the slowest-changing `ceil(N·active)` active units are
/// candidates, and only the run of candidates directly after the frozen
/// prefix may freeze.
pub fn gradnorm_decide(state: &GradNormState, cfg: &GradNormConfig, mask: &FreezeMask) -> Vec<usize> {
    let active = mask.active_units();
    if active.is_empty() {
        return Vec::new();
    }
    let mut rates = Vec::with_capacity(active.len());
    for &u in &active {
        match state.change_rate(u) {
            Some(r) => rates.push((r, u)),
            None => return Vec::new(),
        }
    }
    rates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = (cfg.percentile * active.len() as f64).ceil() as usize;
    let candidates: Vec<usize> = rates[..k].iter().map(|&(_, u)| u).collect();
    let mut out = Vec::new();
    for u in 0..mask.total_units() {
        if mask.is_frozen(u) {
            continue;
        }
        if candidates.contains(&u) {
            out.push(u);
        } else {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmartConfig {
    /// Iterations between freezing stages; a quarter epoch when absent.
    pub freeze_interval: Option<u64>,
    /// Iterations between weight snapshots; the freezing interval when absent.
    pub snapshot_interval: Option<u64>,
    pub min_history: usize,
    pub window: usize,
}

impl Default for SmartConfig {
    fn default() -> Self {
        SmartConfig { freeze_interval: None, snapshot_interval: None, min_history: 5, window: crate::tailor::DEFAULT_WINDOW }
    }
}

impl SmartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_interval == Some(0) || self.snapshot_interval == Some(0) {
            return Err(FrzError::Config("smart intervals must be ≥ 1".into()));
        }
        if self.min_history == 0 {
            return Err(FrzError::Config("smart min_history must be ≥ 1".into()));
        }
        if self.window < self.min_history {
            return Err(FrzError::Config(format!(
                "smart window {} is shorter than min_history {}",
                self.window, self.min_history
            )));
        }
        Ok(())
    }

    pub fn freeze_interval(&self, iters_per_epoch: u64) -> u64 {
        self.freeze_interval.unwrap_or((iters_per_epoch / 4).max(1))
    }

    pub fn snapshot_interval(&self, iters_per_epoch: u64) -> u64 {
        self.snapshot_interval.unwrap_or_else(|| self.freeze_interval(iters_per_epoch))
    }
}

/// Anything that can classify a weight history. Encodings are computed once
/// per snapshot and may be cached by the caller.
pub trait FreezeDecider {
    /// True if each encoding also reads the preceding snapshot; the oldest
    /// snapshot of a window is then only a base and is not encoded.
    fn uses_previous(&self) -> bool {
        false
    }

    /// Encoding of one snapshot and the FLOPs it cost.
    fn encode(&self, prev: Option<&[f32]>, snapshot: &[f32]) -> Result<(Encoding, u64)>;

    fn decide_encoded(&self, sequence: &[&Encoding]) -> Result<DecisionTrace>;
}

impl FreezeDecider for PredictorParams {
    fn uses_previous(&self) -> bool {
        self.preprocess.uses_previous()
    }

    fn encode(&self, prev: Option<&[f32]>, snapshot: &[f32]) -> Result<(Encoding, u64)> {
        Ok((encode_pair(self, prev, snapshot)?, encode_flops(&self.dims)))
    }

    fn decide_encoded(&self, sequence: &[&Encoding]) -> Result<DecisionTrace> {
        decide_encoded(self, sequence)
    }
}

/// Encodings of buffered snapshots, keyed by unit and timestamp.
#[derive(Debug, Clone, Default)]
pub struct EncodingCache {
    units: BTreeMap<usize, BTreeMap<u64, Encoding>>,
}

impl EncodingCache {
    pub fn release(&mut self, unit: usize) {
        self.units.remove(&unit);
    }

    pub fn len(&self) -> usize {
        self.units.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct SmartOutcome {
    pub freeze: Vec<usize>,
    pub confidence: BTreeMap<usize, f64>,
    pub flops: u64,
    pub decisions: usize,
}

/// Runs the decider on every active unit that has at least `min_history`
/// snapshots. Units are judged independently; no ordering constraint.
/// Snapshots already in `cache` are not re-encoded.
pub fn smart_decide(
    decider: Option<&dyn FreezeDecider>,
    buffers: &HistoryBuffer,
    cache: &mut EncodingCache,
    mask: &FreezeMask,
    cfg: &SmartConfig,
) -> Result<SmartOutcome> {
    let decider = decider.ok_or_else(|| FrzError::Config("smart policy requires a predictor".into()))?;
    let mut out = SmartOutcome::default();
    for u in mask.active_units() {
        let window = buffers.window(u);
        if window.len() < cfg.min_history {
            continue;
        }
        let window = &window[window.len().saturating_sub(cfg.window)..];
        let skip = decider.uses_previous() as usize;
        if window.len() <= skip {
            continue;
        }
        let entry = cache.units.entry(u).or_default();
        let oldest = window[skip].timestamp;
        entry.retain(|&t, _| t >= oldest);
        for j in skip..window.len() {
            let s = window[j];
            if !entry.contains_key(&s.timestamp) {
                let prev = if skip == 1 { Some(window[j - 1].values.as_slice()) } else { None };
                let (enc, flops) = decider.encode(prev, &s.values)?;
                out.flops += flops;
                entry.insert(s.timestamp, enc);
            }
        }
        let seq: Vec<&Encoding> = window[skip..].iter().map(|s| &entry[&s.timestamp]).collect();
        let trace = decider.decide_encoded(&seq)?;
        out.flops += trace.flops;
        out.decisions += 1;
        if trace.decision == 1 {
            out.freeze.push(u);
            out.confidence.insert(u, trace.confidence[1]);
        }
    }
    Ok(out)
}

/// Union of `old` and `new_units` at `iteration`; newly frozen units lose
/// their weight history.
pub fn apply_mask(old: &FreezeMask, new_units: &[usize], iteration: u64, buffers: Option<&mut HistoryBuffer>) -> Result<FreezeMask> {
    let next = old.with_frozen(new_units, iteration)?;
    old.check_superset(&next)?;
    if let Some(b) = buffers {
        for &u in new_units {
            b.release(u);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    Linear,
    Gradnorm,
    Smart,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Linear => "linear",
            PolicyKind::Gradnorm => "gradnorm",
            PolicyKind::Smart => "smart",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| FrzError::Config(format!("unknown policy `{s}` (full, linear, gradnorm, smart)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeEvent {
    pub unit_id: usize,
    pub iteration_frozen: u64,
    pub policy: String,
    pub confidence: Option<f64>,
}

pub const EVENT_CSV_HEADER: &str = "unit_id,iteration_frozen,policy,confidence";

pub fn events_to_csv(events: &[FreezeEvent]) -> String {
    let mut out = String::from(EVENT_CSV_HEADER);
    out.push('\n');
    for e in events {
        let conf = e.confidence.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", e.unit_id, e.iteration_frozen, e.policy, conf);
    }
    out
}

pub fn write_events_csv(events: &[FreezeEvent], path: &Path) -> Result<()> {
    std::fs::write(path, events_to_csv(events))?;
    Ok(())
}
