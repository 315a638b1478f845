//! Policy-controlled training runs and their artifacts.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PolicyConfig};
use crate::cost::CostLedger;
use crate::error::{FrzError, Result};
use crate::nn::{build_network, evaluate};
use crate::policies::{write_events_csv, FreezeDecider, FreezeEvent};
use crate::predictor::{load_expecting, PredictorParams};
use crate::tasks::load_task;
use crate::train::{train, Controller, FullController, GradNormController, LinearController, SmartController, TrainConfig, TrainOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub config_digest: String,
    /// Equal for runs that may be compared in one report.
    pub setup_digest: String,
    pub test_accuracy: f64,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub predictor_flops: u64,
    pub total_flops: u64,
    pub peak_act_bytes: u64,
    pub iterations: u64,
    pub total_iterations: u64,
    pub freeze_events: Vec<FreezeEvent>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub output: TrainOutput,
    /// `(iteration, history bytes)` after each freezing stage (smart only).
    pub history_memory: Vec<(u64, usize)>,
}

impl RunOutcome {
    pub fn ledger(&self) -> &CostLedger {
        &self.output.ledger
    }
}

/// Runs `cfg`, loading the predictor from `cfg.predictor` when the policy
/// needs one.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let predictor = match (&cfg.policy, &cfg.predictor) {
        (PolicyConfig::Smart(_), Some(p)) => Some(load_expecting(p, cfg.tailored_size)?.0),
        _ => None,
    };
    run_with_predictor(cfg, predictor.as_ref().map(|p| p as &dyn FreezeDecider))
}

/// As [`run_experiment`] with an in-memory decider for the smart policy.
pub fn run_with_predictor(cfg: &ExperimentConfig, decider: Option<&dyn FreezeDecider>) -> Result<RunOutcome> {
    let start = Instant::now();
    let task = load_task(&cfg.task, cfg.probe_seed)?;
    let state = build_network(&cfg.network, &cfg.units(), cfg.seed)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        shuffle_seed: cfg.seed,
        stop_when_frozen: cfg.stop_when_frozen,
    };
    let mut history_memory = Vec::new();
    let output = match &cfg.policy {
        PolicyConfig::Full => train(state, &task.train, &tc, &mut FullController)?,
        PolicyConfig::Linear(l) => train(state, &task.train, &tc, &mut LinearController::new(l.t0, cfg.lr))?,
        PolicyConfig::Gradnorm(g) => train(state, &task.train, &tc, &mut GradNormController::new(*g))?,
        PolicyConfig::Smart(s) => {
            let mut c = SmartController::new(decider, *s, cfg.tailored_size, cfg.tailor_seed);
            let out = train(state, &task.train, &tc, &mut c as &mut dyn Controller)?;
            history_memory = c.memory;
            out
        }
    };
    let test_accuracy = evaluate(&output.state, &task.test)?;
    let l = &output.ledger;
    let summary = RunSummary {
        method: cfg.policy.kind().name().to_string(),
        task: task.name.clone(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        setup_digest: cfg.setup_digest(),
        test_accuracy,
        fwd_flops: l.fwd_flops,
        bwd_flops: l.bwd_flops,
        predictor_flops: l.predictor_flops,
        total_flops: l.total_flops(),
        peak_act_bytes: l.peak_act_bytes,
        iterations: output.iterations,
        total_iterations: output.total_iterations,
        freeze_events: output.events.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { summary, output, history_memory })
}

/// Writes `summary.json`, `trace.csv` and `events.csv` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.summary).unwrap())?;
    outcome.output.ledger.write_csv(&dir.join("trace.csv"))?;
    write_events_csv(&outcome.output.events, &dir.join("events.csv"))
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| FrzError::Format(format!("{}: {e}", path.display())))
}

/// Convenience for tests and tools holding parameters already.
pub fn run_smart(cfg: &ExperimentConfig, predictor: &PredictorParams) -> Result<RunOutcome> {
    run_with_predictor(cfg, Some(predictor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn cfg(policy: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{
            "network": {{"input": {{"flat": 8}}, "layers": [
                {{"kind": "dense", "in_features": 8, "out_features": 16}}, {{"kind": "relu"}},
                {{"kind": "dense", "in_features": 16, "out_features": 3}}]}},
            "task": {{"id": "blobs", "classes": 3, "dim": 8, "train": 256, "test": 96, "separation": 2.0}},
            "epochs": 4, "policy": {policy}
        }}"#
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn full_run_bwd_matches_closed_form() {
        let c = cfg(r#"{"kind": "full"}"#);
        let out = run_experiment(&c).unwrap();
        let model = crate::cost::CostModel::new(&c.network, &c.units(), 32).unwrap();
        let per = model.iteration_cost(&crate::nn::FreezeMask::empty(2)).unwrap();
        assert_eq!(out.summary.bwd_flops, per.bwd * 32);
        assert_eq!(out.summary.fwd_flops, per.fwd * 32);
        assert!(out.summary.freeze_events.is_empty());
        let rows: u64 = out.ledger().rows.iter().map(|r| r.fwd_flops + r.bwd_flops + r.predictor_flops).sum();
        assert_eq!(rows, out.summary.total_flops);
    }

    #[test]
    fn write_outputs_creates_artifacts() {
        let out = run_experiment(&cfg(r#"{"kind": "gradnorm"}"#)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&out, dir.path()).unwrap();
        let s = load_summary(&dir.path().join("summary.json")).unwrap();
        assert_eq!(s, out.summary);
        assert!(std::fs::read_to_string(dir.path().join("events.csv")).unwrap().starts_with("unit_id,"));
    }
}
