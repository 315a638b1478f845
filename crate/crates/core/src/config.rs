//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};
use crate::nn::{FreezeUnit, NetworkSpec};
use crate::policies::{GradNormConfig, PolicyKind, SmartConfig};
use crate::tailor::DEFAULT_TAILORED_SIZE;
use crate::tasks::TaskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearPolicyConfig {
    #[serde(default = "default_t0")]
    pub t0: f64,
}

fn default_t0() -> f64 {
    0.5
}

impl Default for LinearPolicyConfig {
    fn default() -> Self {
        LinearPolicyConfig { t0: default_t0() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Full,
    Linear(LinearPolicyConfig),
    Gradnorm(GradNormConfig),
    Smart(SmartConfig),
}

impl PolicyConfig {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyConfig::Full => PolicyKind::Full,
            PolicyConfig::Linear(_) => PolicyKind::Linear,
            PolicyConfig::Gradnorm(_) => PolicyKind::Gradnorm,
            PolicyConfig::Smart(_) => PolicyKind::Smart,
        }
    }

    pub fn default_for(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::Full => PolicyConfig::Full,
            PolicyKind::Linear => PolicyConfig::Linear(LinearPolicyConfig::default()),
            PolicyKind::Gradnorm => PolicyConfig::Gradnorm(GradNormConfig::default()),
            PolicyKind::Smart => PolicyConfig::Smart(SmartConfig::default()),
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Vec<FreezeUnit>>,
    pub task: TaskConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Initial rate of the global cosine schedule (per-unit base rate for
    /// linear freezing).
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PathBuf>,
    #[serde(default = "default_tailored")]
    pub tailored_size: usize,
    /// Seeds network initialisation and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tailor_seed: u64,
    #[serde(default)]
    pub probe_seed: u64,
    #[serde(default = "default_true")]
    pub stop_when_frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
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
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn units(&self) -> Vec<FreezeUnit> {
        self.units.clone().unwrap_or_else(|| self.network.default_units())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate_units(&self.units())?;
        if self.batch_size == 0 {
            return Err(FrzError::Config("batch_size: must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FrzError::Config(format!("lr: must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FrzError::Config(format!("momentum: must lie in [0, 1), got {}", self.momentum)));
        }
        match &self.policy {
            PolicyConfig::Full => {}
            PolicyConfig::Linear(l) => {
                if !(l.t0 > 0.0 && l.t0 <= 1.0) {
                    return Err(FrzError::Config(format!("policy.t0: must lie in (0, 1], got {}", l.t0)));
                }
            }
            PolicyConfig::Gradnorm(g) => g.validate().map_err(|e| prefix("policy", e))?,
            PolicyConfig::Smart(s) => {
                s.validate().map_err(|e| prefix("policy", e))?;
                match &self.predictor {
                    None => return Err(FrzError::Config("predictor: required by policy \"smart\"".into())),
                    Some(p) if !p.is_file() => {
                        return Err(FrzError::Config(format!("predictor: {} does not exist", p.display())))
                    }
                    _ => {}
                }
            }
        }
        if let TaskConfig::Digits8(d) = &self.task {
            if !d.dir.is_dir() {
                return Err(FrzError::Config(format!("task.dir: {} is not a directory", d.dir.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        format!("{:x}", Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    /// Digest of the fields that must agree for runs to be comparable:
    /// task, architecture, units, epochs and batch size.
    pub fn setup_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let key = serde_json::json!({
            "task": self.task,
            "network": self.network,
            "units": self.units(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        });
        format!("{:x}", Sha256::digest(serde_json::to_vec(&key).unwrap()))
    }
}

fn prefix(path: &str, e: FrzError) -> FrzError {
    match e {
        FrzError::Config(m) => FrzError::Config(format!("{path}: {m}")),
        other => other,
    }
}

/// Parses JSON text into a validated configuration. Schema errors name the
/// offending key path.
/// Deserialises any JSON config, rejecting unknown keys with their path.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        FrzError::Config(format!("{path}: {}", e.into_inner()))
    })
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FrzError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_json(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse_json(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = load_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn dump_config(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serialises")
}
