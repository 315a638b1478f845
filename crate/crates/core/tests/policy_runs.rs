use std::collections::BTreeMap;

use frz_core::dataset_gen::{generate_from_config, GenConfig};
use frz_core::nn::{build_network, FreezeMask, Gradients, NetworkSpec, NetworkState};
use frz_core::policies::{linear_decide, FreezeDecider, GradNormConfig, LinearFreezeConfig, SmartConfig};
use frz_core::predictor::{DecisionTrace, Encoding};
use frz_core::tasks::{load_task, BlobsConfig, TaskConfig, TaskData};
use frz_core::train::{
    train, Action, Controller, FullController, GradNormController, LinearController, SmartController, StepInfo,
    TrainConfig, TrainOutput,
};
use frz_core::Result;

/// Wraps a controller and keeps every unit's parameter bytes after each step.
struct Recorder<'a> {
    inner: &'a mut dyn Controller,
    seen: BTreeMap<u64, Vec<Vec<u8>>>,
}

impl Controller for Recorder<'_> {
    fn policy_name(&self) -> &str {
        self.inner.policy_name()
    }
    fn begin(&mut self, state: &NetworkState, mask: &FreezeMask, ipe: u64, total: u64) -> Result<()> {
        self.seen.insert(0, state.units.iter().map(|u| u.param_bytes()).collect());
        self.inner.begin(state, mask, ipe, total)
    }
    fn learning_rates(&mut self, k: u64, global: f64, n: usize) -> Vec<f64> {
        self.inner.learning_rates(k, global, n)
    }
    fn on_gradients(&mut self, grads: &Gradients) {
        self.inner.on_gradients(grads)
    }
    fn after_step(&mut self, info: &StepInfo, state: &NetworkState, mask: &FreezeMask) -> Result<Action> {
        self.seen.insert(info.iteration, state.units.iter().map(|u| u.param_bytes()).collect());
        self.inner.after_step(info, state, mask)
    }
}

/// Freezes a unit once six encodings exist and its newest snapshot starts
/// with a positive weight.
struct SignDecider;

impl FreezeDecider for SignDecider {
    fn encode(&self, _prev: Option<&[f32]>, snapshot: &[f32]) -> Result<(Encoding, u64)> {
        Ok((Encoding { key: vec![snapshot[0]], query: vec![], value: vec![] }, 1))
    }
    fn decide_encoded(&self, seq: &[&Encoding]) -> Result<DecisionTrace> {
        let d = (seq.len() >= 6 && seq.last().unwrap().key[0] > 0.0) as u8;
        Ok(DecisionTrace { alphas: vec![], context: vec![], confidence: [1.0 - d as f64, d as f64], decision: d, flops: 1 })
    }
}

struct Never;

impl FreezeDecider for Never {
    fn encode(&self, _prev: Option<&[f32]>, _snapshot: &[f32]) -> Result<(Encoding, u64)> {
        Ok((Encoding { key: vec![], query: vec![], value: vec![] }, 3))
    }
    fn decide_encoded(&self, _seq: &[&Encoding]) -> Result<DecisionTrace> {
        Ok(DecisionTrace { alphas: vec![], context: vec![], confidence: [0.9, 0.1], decision: 0, flops: 2 })
    }
}

fn task() -> TaskData {
    let cfg = BlobsConfig { classes: 3, dim: 12, train: 512, test: 128, seed: 3, ..Default::default() };
    load_task(&TaskConfig::Blobs(cfg), 0).unwrap()
}

fn net(seed: u64) -> NetworkState {
    let spec = NetworkSpec::mlp(&[12, 48, 40, 32, 3]);
    build_network(&spec, &spec.default_units(), seed).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig { epochs: 8, batch_size: 32, lr: 0.05, momentum: 0.9, shuffle_seed: 11, stop_when_frozen: false }
}

fn recorded(c: &mut dyn Controller, data: &TaskData) -> (TrainOutput, BTreeMap<u64, Vec<Vec<u8>>>) {
    let mut r = Recorder { inner: c, seen: BTreeMap::new() };
    let out = train(net(1), &data.train, &cfg(), &mut r).unwrap();
    (out, r.seen)
}

fn assert_frozen_untouched(out: &TrainOutput, seen: &BTreeMap<u64, Vec<Vec<u8>>>) {
    for e in &out.events {
        let at_freeze = &seen[&e.iteration_frozen][e.unit_id];
        assert_eq!(&out.state.units[e.unit_id].param_bytes(), at_freeze, "unit {}", e.unit_id);
        assert_eq!(&out.frozen_params[&e.unit_id], at_freeze);
    }
}

#[test]
fn frozen_units_never_change() {
    let data = task();
    let smart = SmartConfig { min_history: 3, ..Default::default() };
    let controllers: Vec<Box<dyn Controller>> = vec![
        Box::new(LinearController::new(0.3, 0.05)),
        Box::new(GradNormController::new(GradNormConfig::default())),
        Box::new(SmartController::new(Some(&SignDecider), smart, 64, 2)),
    ];
    for mut c in controllers {
        let (out, seen) = recorded(c.as_mut(), &data);
        assert!(!out.events.is_empty(), "{} froze nothing", out.events.len());
        assert_frozen_untouched(&out, &seen);
    }
}

#[test]
fn oracle_generation_freezes_immutably() {
    let g: GenConfig = serde_json::from_str(
        r#"{"network": {"input": {"flat": 12}, "layers": [
                {"kind": "dense", "in_features": 12, "out_features": 32}, {"kind": "relu"},
                {"kind": "dense", "in_features": 32, "out_features": 3}]},
            "task": {"id": "blobs", "classes": 3, "dim": 12, "train": 512, "test": 64, "seed": 3},
            "reference_epochs": 8, "generation_epochs": 8, "tailored_size": 32, "window": 6,
            "stabilization": {"window": 2, "eps": 0.05, "min_score": 0.3}}"#,
    )
    .unwrap();
    let (_, gen) = generate_from_config(&g).unwrap();
    assert!(!gen.run.events.is_empty());
    for e in &gen.run.events {
        assert_eq!(gen.run.state.units[e.unit_id].param_bytes(), gen.run.frozen_params[&e.unit_id]);
    }
}

#[test]
fn always_continue_matches_full_training_bit_for_bit() {
    let data = task();
    let full = train(net(4), &data.train, &cfg(), &mut FullController).unwrap();
    let mut smart = SmartController::new(Some(&Never), SmartConfig::default(), 64, 0);
    let never = train(net(4), &data.train, &cfg(), &mut smart).unwrap();
    for (a, b) in full.state.units.iter().zip(&never.state.units) {
        assert_eq!(a.param_bytes(), b.param_bytes());
    }
    let losses = |o: &TrainOutput| o.ledger.rows.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&full), losses(&never));
    assert_eq!((full.ledger.fwd_flops, full.ledger.bwd_flops), (never.ledger.fwd_flops, never.ledger.bwd_flops));
    assert!(never.events.is_empty());
    assert!(never.ledger.predictor_flops > 0);
}

#[test]
fn linear_events_land_on_schedule_boundaries() {
    let data = task();
    let mut c = LinearController::new(0.4, 0.05);
    let out = train(net(2), &data.train, &cfg(), &mut c).unwrap();
    let sched = LinearFreezeConfig::new(0.4, out.total_iterations, vec![0.05; 4]).unwrap();
    assert_eq!(out.events.len(), 4);
    for e in &out.events {
        let ti = sched.zero_time(e.unit_id);
        assert_eq!(e.iteration_frozen, ti.ceil() as u64);
        assert!((e.iteration_frozen as f64) >= ti && (e.iteration_frozen as f64) < ti + 1.0);
        let before = linear_decide(&sched, e.iteration_frozen - 1);
        assert!(!before.is_frozen(e.unit_id));
    }
}

#[test]
fn ledger_closes_over_trace_rows() {
    let data = task();
    let mut c = SmartController::new(Some(&SignDecider), SmartConfig { min_history: 3, ..Default::default() }, 64, 2);
    let out = train(net(5), &data.train, &cfg(), &mut c).unwrap();
    let l = &out.ledger;
    assert_eq!(l.fwd_flops, l.rows.iter().map(|r| r.fwd_flops).sum::<u64>());
    assert_eq!(l.bwd_flops, l.rows.iter().map(|r| r.bwd_flops).sum::<u64>());
    assert_eq!(l.predictor_flops, l.rows.iter().map(|r| r.predictor_flops).sum::<u64>());
    assert_eq!(l.peak_act_bytes, l.rows.iter().map(|r| r.act_bytes).max().unwrap());
}
