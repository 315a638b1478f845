//! The training loop shared by every policy, reference training and
//! dataset generation.
//!
//! Step `k` (0-based) uses the learning rate for `k`. After it completes the
//! iteration counter is `t = k + 1`, snapshots are taken for `t`, and any
//! freeze decided then is stamped with `t`. Snapshots for `t = 0` are taken
//! before the first step.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{CostLedger, CostModel, TraceRow};
use crate::error::{FrzError, Result};
use crate::nn::{backward, forward, softmax_cross_entropy, sgd_step_per_unit, Batch, FreezeMask, Gradients, NetworkState};
use crate::policies::{
    apply_mask, gradnorm_decide, linear_decide, linear_lr, smart_decide, FreezeDecider, FreezeEvent, GradNormConfig,
    GradNormState, LinearFreezeConfig, SmartConfig, EncodingCache,
};
use crate::tailor::{make_plan, snapshot, HistoryBuffer, TailorPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
    /// End the run once every unit is frozen.
    pub stop_when_frozen: bool,
}

impl TrainConfig {
    pub fn iterations_per_epoch(&self, samples: usize) -> Result<u64> {
        if self.batch_size == 0 || samples < self.batch_size {
            return Err(FrzError::Config(format!("{samples} training samples cannot fill a batch of {}", self.batch_size)));
        }
        Ok((samples / self.batch_size) as u64)
    }
}

/// Cosine annealing from `lr0` to zero over `total` steps.
pub fn cosine_lr(lr0: f64, k: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (PI * k as f64 / total as f64).cos())
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Completed steps.
    pub iteration: u64,
    /// 1-based epoch the step belonged to.
    pub epoch: u64,
    pub epoch_end: bool,
    pub loss: f64,
    pub iters_per_epoch: u64,
    pub total_iterations: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Action {
    pub freeze: Vec<usize>,
    pub predictor_flops: u64,
    pub confidence: BTreeMap<usize, f64>,
}

/// Hooks a policy plugs into the loop.
pub trait Controller {
    fn policy_name(&self) -> &str;

    fn begin(&mut self, _state: &NetworkState, _mask: &FreezeMask, _iters_per_epoch: u64, _total: u64) -> Result<()> {
        Ok(())
    }

    /// Per-unit rates for step `k`; `global` is the cosine schedule value.
    fn learning_rates(&mut self, _k: u64, global: f64, num_units: usize) -> Vec<f64> {
        vec![global; num_units]
    }

    fn on_gradients(&mut self, _grads: &Gradients) {}

    fn after_step(&mut self, info: &StepInfo, state: &NetworkState, mask: &FreezeMask) -> Result<Action>;
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: NetworkState,
    pub mask: FreezeMask,
    pub ledger: CostLedger,
    pub events: Vec<FreezeEvent>,
    /// Parameter bytes of each unit at the moment it froze.
    pub frozen_params: BTreeMap<usize, Vec<u8>>,
    pub iterations: u64,
    pub total_iterations: u64,
    pub iters_per_epoch: u64,
}

pub fn train(mut state: NetworkState, data: &Batch, cfg: &TrainConfig, controller: &mut dyn Controller) -> Result<TrainOutput> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(FrzError::Config(format!("lr must be ≥ 0, got {}", cfg.lr)));
    }
    let n = data.len();
    let ipe = if cfg.epochs == 0 { n.checked_div(cfg.batch_size).unwrap_or(0) as u64 } else { cfg.iterations_per_epoch(n)? };
    let total = ipe * cfg.epochs as u64;
    let d = data.inputs.len() / n.max(1);
    let units = state.freeze_units();
    let model = CostModel::new(&state.spec, &units, cfg.batch_size.max(1))?;
    let mut mask = FreezeMask::empty(state.num_units());
    let mut ledger = CostLedger::new();
    let mut events = Vec::new();
    let mut frozen_params = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    controller.begin(&state, &mask, ipe, total)?;
    let mut k = 0u64;
    'epochs: for epoch in 1..=cfg.epochs as u64 {
        order.shuffle(&mut rng);
        for b in 0..ipe as usize {
            if cfg.stop_when_frozen && mask.all_frozen() {
                break 'epochs;
            }
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let mut inputs = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                inputs.extend_from_slice(&data.inputs[i * d..(i + 1) * d]);
            }
            let batch = Batch::new(inputs, idx.iter().map(|&i| data.labels[i]).collect());
            let run_err = |e: FrzError| match e {
                FrzError::NumericOverflow { layer } => {
                    FrzError::Run { iteration: k, message: format!("non-finite activations at layer {layer}") }
                }
                other => other,
            };
            let (cache, logits) = forward(&state, &batch, &mask).map_err(run_err)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels);
            if !loss.is_finite() {
                return Err(FrzError::Run { iteration: k, message: "non-finite loss".into() });
            }
            let grads = backward(&state, &cache, &dlogits, &mask).map_err(run_err)?;
            controller.on_gradients(&grads);
            let global = cosine_lr(cfg.lr, k, total);
            let lrs: Vec<f32> = controller.learning_rates(k, global, state.num_units()).into_iter().map(|v| v as f32).collect();
            sgd_step_per_unit(&mut state, &grads, &lrs, cfg.momentum as f32, &mask)?;
            let cost = model.iteration_cost(&mask)?;
            debug_assert_eq!((cost.fwd, cost.bwd), (cache.flops, grads.flops));
            let frozen_before = mask.len();
            k += 1;
            let info = StepInfo {
                iteration: k,
                epoch,
                epoch_end: b + 1 == ipe as usize,
                loss,
                iters_per_epoch: ipe,
                total_iterations: total,
            };
            let action = controller.after_step(&info, &state, &mask)?;
            let fresh: Vec<usize> = action.freeze.iter().copied().filter(|&u| !mask.is_frozen(u)).collect();
            mask = apply_mask(&mask, &fresh, k, None)?;
            for &u in &fresh {
                frozen_params.insert(u, state.units[u].param_bytes());
                events.push(FreezeEvent {
                    unit_id: u,
                    iteration_frozen: k,
                    policy: controller.policy_name().to_string(),
                    confidence: action.confidence.get(&u).copied(),
                });
            }
            ledger.accumulate(TraceRow {
                iteration: k,
                epoch,
                fwd_flops: cost.fwd,
                bwd_flops: cost.bwd,
                predictor_flops: action.predictor_flops,
                act_bytes: cost.act_bytes,
                frozen_units: frozen_before,
                train_loss: loss,
            });
        }
    }
    Ok(TrainOutput { state, mask, ledger, events, frozen_params, iterations: k, total_iterations: total, iters_per_epoch: ipe })
}

/// No freezing.
#[derive(Debug, Default)]
pub struct FullController;

impl Controller for FullController {
    fn policy_name(&self) -> &str {
        "full"
    }

    fn after_step(&mut self, _: &StepInfo, _: &NetworkState, _: &FreezeMask) -> Result<Action> {
        Ok(Action::default())
    }
}

/// Layer-wise cosine rates; a unit freezes once its rate reaches zero.
#[derive(Debug)]
pub struct LinearController {
    pub t0: f64,
    pub base_lr: f64,
    cfg: Option<LinearFreezeConfig>,
}

impl LinearController {
    pub fn new(t0: f64, base_lr: f64) -> Self {
        LinearController { t0, base_lr, cfg: None }
    }

    pub fn schedule(&self) -> Option<&LinearFreezeConfig> {
        self.cfg.as_ref()
    }
}

impl Controller for LinearController {
    fn policy_name(&self) -> &str {
        "linear"
    }

    fn begin(&mut self, state: &NetworkState, _: &FreezeMask, _: u64, total: u64) -> Result<()> {
        self.cfg = Some(LinearFreezeConfig::new(self.t0, total, vec![self.base_lr; state.num_units()])?);
        Ok(())
    }

    fn learning_rates(&mut self, k: u64, _global: f64, num_units: usize) -> Vec<f64> {
        let cfg = self.cfg.as_ref().expect("begin sets the schedule");
        (0..num_units).map(|i| linear_lr(cfg, i, k as f64)).collect()
    }

    fn after_step(&mut self, info: &StepInfo, _: &NetworkState, mask: &FreezeMask) -> Result<Action> {
        let target = linear_decide(self.cfg.as_ref().unwrap(), info.iteration);
        let freeze = target.frozen_units().filter(|&u| !mask.is_frozen(u)).collect();
        Ok(Action { freeze, ..Default::default() })
    }
}

/// Gradient-norm percentile freezing with the sequential constraint.
#[derive(Debug)]
pub struct GradNormController {
    pub cfg: GradNormConfig,
    pub state: GradNormState,
    interval: u64,
}

impl GradNormController {
    pub fn new(cfg: GradNormConfig) -> Self {
        GradNormController { cfg, state: GradNormState::default(), interval: 1 }
    }
}

impl Controller for GradNormController {
    fn policy_name(&self) -> &str {
        "gradnorm"
    }

    fn begin(&mut self, _: &NetworkState, _: &FreezeMask, ipe: u64, _: u64) -> Result<()> {
        self.cfg.validate()?;
        self.interval = (ipe / self.cfg.intervals_per_epoch as u64).max(1);
        Ok(())
    }

    fn on_gradients(&mut self, grads: &Gradients) {
        self.state.record(grads);
    }

    fn after_step(&mut self, info: &StepInfo, _: &NetworkState, mask: &FreezeMask) -> Result<Action> {
        if info.iteration % self.interval != 0 {
            return Ok(Action::default());
        }
        self.state.close_interval();
        Ok(Action { freeze: gradnorm_decide(&self.state, &self.cfg, mask), ..Default::default() })
    }
}

/// Periodic tailored snapshots of every active unit.
#[derive(Debug, Clone)]
pub struct SnapshotRecorder {
    pub tailored_size: usize,
    pub tailor_seed: u64,
    pub plan: Option<TailorPlan>,
    pub buffers: HistoryBuffer,
    pub interval: u64,
}

impl SnapshotRecorder {
    pub fn new(window: usize, tailored_size: usize, tailor_seed: u64) -> Self {
        SnapshotRecorder { tailored_size, tailor_seed, plan: None, buffers: HistoryBuffer::new(window, tailored_size), interval: 1 }
    }

    pub fn begin(&mut self, state: &NetworkState, mask: &FreezeMask, interval: u64) -> Result<()> {
        self.interval = interval.max(1);
        self.plan = Some(make_plan(state, self.tailored_size, self.tailor_seed)?);
        self.take(state, mask, 0)
    }

    pub fn take(&mut self, state: &NetworkState, mask: &FreezeMask, t: u64) -> Result<()> {
        let plan = self.plan.as_ref().expect("begin builds the plan");
        self.buffers.push(snapshot(state, plan, mask, t)?)
    }

    pub fn maybe_take(&mut self, state: &NetworkState, mask: &FreezeMask, t: u64) -> Result<()> {
        if t % self.interval == 0 {
            self.take(state, mask, t)?;
        }
        Ok(())
    }
}

/// Predictor-driven freezing at periodic freezing stages.
pub struct SmartController<'a> {
    pub decider: Option<&'a dyn FreezeDecider>,
    pub cfg: SmartConfig,
    pub recorder: SnapshotRecorder,
    pub cache: EncodingCache,
    freeze_interval: u64,
    /// `(iteration, history bytes)` after every freezing stage.
    pub memory: Vec<(u64, usize)>,
    pub decisions: usize,
}

impl<'a> SmartController<'a> {
    pub fn new(decider: Option<&'a dyn FreezeDecider>, cfg: SmartConfig, tailored_size: usize, tailor_seed: u64) -> Self {
        SmartController {
            decider,
            cfg,
            recorder: SnapshotRecorder::new(cfg.window, tailored_size, tailor_seed),
            cache: EncodingCache::default(),
            freeze_interval: 1,
            memory: Vec::new(),
            decisions: 0,
        }
    }
}

impl Controller for SmartController<'_> {
    fn policy_name(&self) -> &str {
        "smart"
    }

    fn begin(&mut self, state: &NetworkState, mask: &FreezeMask, ipe: u64, _: u64) -> Result<()> {
        self.cfg.validate()?;
        if self.decider.is_none() {
            return Err(FrzError::Config("smart policy requires a predictor".into()));
        }
        self.freeze_interval = self.cfg.freeze_interval(ipe);
        self.recorder.begin(state, mask, self.cfg.snapshot_interval(ipe))
    }

    fn after_step(&mut self, info: &StepInfo, state: &NetworkState, mask: &FreezeMask) -> Result<Action> {
        self.recorder.maybe_take(state, mask, info.iteration)?;
        if info.iteration % self.freeze_interval != 0 {
            return Ok(Action::default());
        }
        let out = smart_decide(self.decider, &self.recorder.buffers, &mut self.cache, mask, &self.cfg)?;
        self.decisions += out.decisions;
        for &u in &out.freeze {
            self.recorder.buffers.release(u);
            self.cache.release(u);
        }
        self.memory.push((info.iteration, self.recorder.buffers.bytes()));
        Ok(Action { freeze: out.freeze, predictor_flops: out.flops, confidence: out.confidence })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, NetworkSpec};

    fn toy() -> (NetworkState, Batch) {
        let spec = NetworkSpec::mlp(&[2, 8, 2]);
        let state = build_network(&spec, &spec.default_units(), 3).unwrap();
        let inputs: Vec<f32> = (0..64).flat_map(|i| [(i % 7) as f32 / 7.0 - 0.5, (i % 5) as f32 / 5.0 - 0.5]).collect();
        let labels = (0..64).map(|i| (i % 7 > 3) as usize).collect();
        (state, Batch::new(inputs, labels))
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, lr: 0.1, momentum: 0.9, shuffle_seed: 1, stop_when_frozen: true }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.2, 0, 10), 0.2);
        assert!((cosine_lr(0.2, 5, 10) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(0.2, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let (s, data) = toy();
        let out = train(s.clone(), &data, &cfg(0), &mut FullController).unwrap();
        assert_eq!(out.state.units, s.units);
        assert!(out.ledger.rows.is_empty());
    }

    #[test]
    fn full_training_is_deterministic() {
        let (s, data) = toy();
        let a = train(s.clone(), &data, &cfg(3), &mut FullController).unwrap();
        let b = train(s, &data, &cfg(3), &mut FullController).unwrap();
        assert_eq!(a.ledger.to_csv(), b.ledger.to_csv());
        assert_eq!(a.state.units, b.state.units);
        assert_eq!(a.ledger.rows.len(), 24);
    }

    #[test]
    fn linear_freezes_at_ceil_of_zero_times() {
        let (s, data) = toy();
        let mut c = LinearController::new(0.5, 0.1);
        let out = train(s, &data, &cfg(5), &mut c).unwrap();
        let sched = c.schedule().unwrap();
        for e in &out.events {
            assert_eq!(e.iteration_frozen, sched.freeze_iteration(e.unit_id));
        }
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[0].iteration_frozen, 20);
    }

    #[test]
    fn non_finite_loss_is_a_run_error() {
        let (s, data) = toy();
        let mut c = cfg(5);
        c.lr = 1e30;
        let err = train(s, &data, &c, &mut FullController).unwrap_err();
        assert!(matches!(err, FrzError::Run { .. }), "{err}");
    }
}
