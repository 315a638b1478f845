//! Minimal sequential training engine with per-unit freeze masks.

mod checkpoint;
mod engine;
mod mask;
mod spec;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_KIND};
pub use engine::{
    backward, evaluate, forward, forward_outputs, infer, softmax_cross_entropy, ActivationCache,
    Gradients,
};
pub use mask::{BackwardPlan, FreezeMask, LayerRole};
pub use spec::{FreezeUnit, LayerSpec, NetworkSpec, Shape};
pub use state::{build_network, sgd_step, sgd_step_per_unit, NetworkState, ParamTensor, UnitParams};

/// A supervised mini-batch: `inputs` holds `len()` samples back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f32>, labels: Vec<usize>) -> Self {
        Batch { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
