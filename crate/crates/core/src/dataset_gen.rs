//! Predictor training data: train a reference model, retrain the same
//! architecture while recording tailored histories, and label each history
//! by whether the unit's CKA against the reference has settled.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cka::{cka_f64, stabilized, CkaPoint, CkaTrace, StabilizationConfig};
use crate::container::Container;
use crate::error::{FrzError, Result};
use crate::nn::{build_network, forward_outputs, FreezeMask, FreezeUnit, NetworkSpec, NetworkState};
use crate::predictor::TrainRecord;
use crate::tailor::{DEFAULT_TAILORED_SIZE, DEFAULT_WINDOW};
use crate::tasks::{load_task, TaskConfig, TaskData};
use crate::train::{train, Action, Controller, FullController, SnapshotRecorder, StepInfo, TrainConfig, TrainOutput};

pub const DATASET_KIND: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub units: Option<Vec<FreezeUnit>>,
    pub task: TaskConfig,
    pub reference_epochs: usize,
    pub generation_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Iterations between CKA checkpoints; one epoch when absent.
    #[serde(default)]
    pub checkpoint_interval: Option<u64>,
    /// Iterations between weight snapshots; a quarter epoch when absent.
    #[serde(default)]
    pub snapshot_interval: Option<u64>,
    #[serde(default = "default_tailored")]
    pub tailored_size: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub stabilization: StabilizationConfig,
    #[serde(default = "default_true")]
    pub center: bool,
    #[serde(default = "default_true")]
    pub oracle_freezing: bool,
    #[serde(default)]
    pub reference_seed: u64,
    #[serde(default = "default_generation_seed")]
    pub generation_seed: u64,
    #[serde(default)]
    pub tailor_seed: u64,
    #[serde(default)]
    pub probe_seed: u64,
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_tailored() -> usize {
    DEFAULT_TAILORED_SIZE
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_true() -> bool {
    true
}
fn default_generation_seed() -> u64 {
    1
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate_units(&self.units())?;
        self.stabilization.validate()?;
        if self.window == 0 || self.window > u16::MAX as usize {
            return Err(FrzError::Config(format!("window must lie in 1..=65535, got {}", self.window)));
        }
        if self.tailored_size == 0 {
            return Err(FrzError::Config("tailored_size must be ≥ 1".into()));
        }
        if self.checkpoint_interval == Some(0) || self.snapshot_interval == Some(0) {
            return Err(FrzError::Config("checkpoint and snapshot intervals must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn units(&self) -> Vec<FreezeUnit> {
        self.units.clone().unwrap_or_else(|| self.network.default_units())
    }

    /// Copy with every seed, the task's included, shifted by `k`, so one
    /// base config yields a family of independent generation runs.
    pub fn with_seed_offset(&self, k: u64) -> GenConfig {
        GenConfig {
            task: self.task.with_seed_offset(k),
            reference_seed: self.reference_seed + k,
            generation_seed: self.generation_seed + k,
            tailor_seed: self.tailor_seed + k,
            probe_seed: self.probe_seed + k,
            ..self.clone()
        }
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json))
    }

    fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            shuffle_seed: seed,
            stop_when_frozen: true,
        }
    }
}

/// Full training of the reference model.
pub fn train_reference(cfg: &GenConfig, task: &TaskData) -> Result<TrainOutput> {
    cfg.validate()?;
    let state = build_network(&cfg.network, &cfg.units(), cfg.reference_seed)?;
    train(state, &task.train, &cfg.train_config(cfg.reference_epochs, cfg.reference_seed), &mut FullController)
}

/// Output of one generation run.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: DatasetFile,
    pub trace: CkaTrace,
    pub run: TrainOutput,
    /// `(unit, checkpoint) → label` as emitted.
    pub labels: BTreeMap<(usize, usize), u8>,
}

struct OracleController<'a> {
    cfg: &'a GenConfig,
    probe: &'a [f32],
    probe_len: usize,
    reference: BTreeMap<usize, (Vec<f64>, usize)>,
    last_layer: Vec<usize>,
    recorder: SnapshotRecorder,
    checkpoint_interval: u64,
    checkpoint: usize,
    trace: CkaTrace,
    on: BTreeMap<usize, bool>,
    records: Vec<TrainRecord>,
    labels: BTreeMap<(usize, usize), u8>,
}

impl OracleController<'_> {
    fn unit_outputs(&self, state: &NetworkState) -> Result<BTreeMap<usize, (Vec<f64>, usize)>> {
        let outs = forward_outputs(state, self.probe, self.probe_len)?;
        Ok(self
            .last_layer
            .iter()
            .enumerate()
            .map(|(u, &l)| {
                let o = &outs[l];
                (u, (o.iter().map(|&v| v as f64).collect(), o.len() / self.probe_len))
            })
            .collect())
    }
}

impl Controller for OracleController<'_> {
    fn policy_name(&self) -> &str {
        "oracle"
    }

    fn begin(&mut self, state: &NetworkState, mask: &FreezeMask, ipe: u64, _: u64) -> Result<()> {
        self.checkpoint_interval = self.cfg.checkpoint_interval.unwrap_or(ipe).max(1);
        self.recorder.begin(state, mask, self.cfg.snapshot_interval.unwrap_or((ipe / 4).max(1)))
    }

    fn after_step(&mut self, info: &StepInfo, state: &NetworkState, mask: &FreezeMask) -> Result<Action> {
        self.recorder.maybe_take(state, mask, info.iteration)?;
        if info.iteration % self.checkpoint_interval != 0 {
            return Ok(Action::default());
        }
        self.checkpoint += 1;
        let c = self.checkpoint;
        let current = self.unit_outputs(state)?;
        let mut freeze = Vec::new();
        for u in mask.active_units() {
            let (x, dx) = &current[&u];
            let (y, dy) = &self.reference[&u];
            let score = cka_f64(x, *dx, y, *dy, self.probe_len, self.cfg.center)?;
            self.trace.push(u, CkaPoint { checkpoint: c, epoch: info.iteration / info.iters_per_epoch.max(1), score });
            let on = self.on.entry(u).or_insert(false);
            *on = *on || stabilized(&self.trace.scores(u), &self.cfg.stabilization);
            let label = *on as u8;
            self.labels.insert((u, c), label);
            let window = self.recorder.buffers.window(u);
            if !window.is_empty() {
                self.records.push(TrainRecord { sequence: window.iter().map(|s| s.values.clone()).collect(), label });
            }
            if label == 1 && self.cfg.oracle_freezing {
                freeze.push(u);
                self.recorder.buffers.release(u);
            }
        }
        Ok(Action { freeze, ..Default::default() })
    }
}

/// Retrains the architecture from `generation_seed`, labelling histories
/// against `reference`.
pub fn generate(cfg: &GenConfig, task: &TaskData, reference: &NetworkState) -> Result<Generated> {
    cfg.validate()?;
    let units = cfg.units();
    if reference.spec != cfg.network || reference.freeze_units() != units {
        return Err(FrzError::Config("reference checkpoint architecture differs from the generation config".into()));
    }
    let state = build_network(&cfg.network, &units, cfg.generation_seed)?;
    let last_layer: Vec<usize> = units.iter().map(|u| *u.layer_indices.last().unwrap()).collect();
    let mut ctl = OracleController {
        cfg,
        probe: &task.probe,
        probe_len: task.probe_len,
        reference: BTreeMap::new(),
        last_layer,
        recorder: SnapshotRecorder::new(cfg.window, cfg.tailored_size, cfg.tailor_seed),
        checkpoint_interval: 1,
        checkpoint: 0,
        trace: CkaTrace::default(),
        on: BTreeMap::new(),
        records: Vec::new(),
        labels: BTreeMap::new(),
    };
    ctl.reference = ctl.unit_outputs(reference)?;
    let run = train(state, &task.train, &cfg.train_config(cfg.generation_epochs, cfg.generation_seed), &mut ctl)?;
    let dataset = DatasetFile {
        window: cfg.window,
        tailored_size: cfg.tailored_size,
        provenance: cfg.digest(),
        records: ctl.records,
    };
    Ok(Generated { dataset, trace: ctl.trace, run, labels: ctl.labels })
}

/// Loads the task, trains the reference and generates in one call.
pub fn generate_from_config(cfg: &GenConfig) -> Result<(NetworkState, Generated)> {
    let task = load_task(&cfg.task, cfg.probe_seed)?;
    let reference = train_reference(cfg, &task)?.state;
    let g = generate(cfg, &task, &reference)?;
    Ok((reference, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub window: usize,
    pub tailored_size: usize,
    /// Digest of the generating configuration(s).
    pub provenance: String,
    pub records: Vec<TrainRecord>,
}

impl DatasetFile {
    pub fn label_counts(&self) -> [usize; 2] {
        let ones = self.records.iter().filter(|r| r.label == 1).count();
        [self.records.len() - ones, ones]
    }

    /// Fails unless both labels occur.
    pub fn ensure_both_labels(&self) -> Result<()> {
        let [zeros, ones] = self.label_counts();
        if zeros == 0 || ones == 0 {
            return Err(FrzError::Dataset(format!(
                "generated dataset has {zeros} continue and {ones} freeze records; adjust epochs or stabilization"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.sequence.is_empty() || r.sequence.len() > self.window {
                return Err(FrzError::Format(format!("record {i} has {} snapshots, window is {}", r.sequence.len(), self.window)));
            }
            if r.label > 1 {
                return Err(FrzError::Format(format!("record {i} has label {}", r.label)));
            }
            if r.sequence.iter().any(|s| s.len() != self.tailored_size) {
                return Err(FrzError::Format(format!("record {i} has a snapshot not of size {}", self.tailored_size)));
            }
        }
        Ok(())
    }

    /// Joins datasets with the same window and tailored size.
    pub fn concat(parts: &[DatasetFile]) -> Result<DatasetFile> {
        let first = parts.first().ok_or_else(|| FrzError::Dataset("nothing to concatenate".into()))?;
        let mut hasher = Sha256::new();
        let mut records = Vec::new();
        for p in parts {
            if (p.window, p.tailored_size) != (first.window, first.tailored_size) {
                return Err(FrzError::Dataset("datasets differ in window or tailored size".into()));
            }
            hasher.update(p.provenance.as_bytes());
            hasher.update([0u8]);
            records.extend(p.records.iter().cloned());
        }
        let provenance = if parts.len() == 1 { first.provenance.clone() } else { format!("{:x}", hasher.finalize()) };
        Ok(DatasetFile { window: first.window, tailored_size: first.tailored_size, provenance, records })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(DATASET_KIND);
        c.set_field("window", &self.window);
        c.set_field("tailored_size", &self.tailored_size);
        c.set_field("count", &self.records.len());
        c.set_field("provenance", &self.provenance);
        for r in &self.records {
            c.payload.extend((r.sequence.len() as u16).to_le_bytes());
            for s in &r.sequence {
                for v in s {
                    c.payload.extend(v.to_le_bytes());
                }
            }
            c.payload.push(r.label);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(DATASET_KIND)?;
        let window: usize = c.header_field("window")?;
        let tailored_size: usize = c.header_field("tailored_size")?;
        let count: usize = c.header_field("count")?;
        let provenance: String = c.header_field("provenance")?;
        let p = &c.payload;
        let mut pos = 0;
        let mut records = Vec::with_capacity(count);
        let short = || FrzError::Format("dataset payload truncated".into());
        for _ in 0..count {
            let len = u16::from_le_bytes(p.get(pos..pos + 2).ok_or_else(short)?.try_into().unwrap()) as usize;
            pos += 2;
            let bytes = p.get(pos..pos + len * tailored_size * 4).ok_or_else(short)?;
            pos += bytes.len();
            let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let label = *p.get(pos).ok_or_else(short)?;
            pos += 1;
            records.push(TrainRecord { sequence: values.chunks(tailored_size.max(1)).map(<[f32]>::to_vec).collect(), label });
        }
        if pos != p.len() {
            return Err(FrzError::Format(format!("dataset payload has {} trailing bytes", p.len() - pos)));
        }
        let d = DatasetFile { window, tailored_size, provenance, records };
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
