use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{FrzError, Result};

/// Monotonically growing set of frozen units with the iteration each one
/// was frozen at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    total_units: usize,
    frozen: BTreeMap<usize, u64>,
    order: Vec<usize>,
}

impl FreezeMask {
    pub fn empty(total_units: usize) -> Self {
        FreezeMask { total_units, frozen: BTreeMap::new(), order: Vec::new() }
    }

    pub fn total_units(&self) -> usize {
        self.total_units
    }

    pub fn is_frozen(&self, unit: usize) -> bool {
        self.frozen.contains_key(&unit)
    }

    pub fn frozen_at(&self, unit: usize) -> Option<u64> {
        self.frozen.get(&unit).copied()
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen.len() == self.total_units
    }

    /// Frozen units in the order they were added.
    pub fn events(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.order.iter().map(move |u| (*u, self.frozen[u]))
    }

    pub fn frozen_units(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.keys().copied()
    }

    pub fn active_units(&self) -> Vec<usize> {
        (0..self.total_units).filter(|u| !self.is_frozen(*u)).collect()
    }

    /// Union with `units`, recording `iteration` for the newly added ones.
    /// Already-frozen units keep their original iteration.
    pub fn with_frozen(&self, units: &[usize], iteration: u64) -> Result<FreezeMask> {
        let mut next = self.clone();
        for &u in units {
            if u >= self.total_units {
                return Err(FrzError::Contract(format!(
                    "unit {u} out of range for {} units",
                    self.total_units
                )));
            }
            if next.frozen.contains_key(&u) {
                continue;
            }
            if let Some(last) = next.order.last() {
                if next.frozen[last] > iteration {
                    return Err(FrzError::Contract(format!(
                        "freeze iteration {iteration} precedes earlier freeze at {}",
                        next.frozen[last]
                    )));
                }
            }
            next.frozen.insert(u, iteration);
            next.order.push(u);
        }
        Ok(next)
    }

    /// Accepts `next` only if it contains every unit frozen here, with the
    /// same iterations.
    pub fn check_superset(&self, next: &FreezeMask) -> Result<()> {
        for (u, it) in &self.frozen {
            match next.frozen.get(u) {
                None => return Err(FrzError::Contract(format!("attempt to unfreeze unit {u}"))),
                Some(j) if j != it => {
                    return Err(FrzError::Contract(format!("unit {u} freeze iteration rewritten")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// How a layer participates in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    /// Dense, conv or norm: weight gradient needs the stored input.
    Params,
    /// Elementwise activation: input gradient needs the stored input.
    Activation,
    /// Pure reshape, stores nothing.
    Reshape,
}

impl LayerRole {
    pub fn of(layer: &LayerSpec) -> Self {
        match layer {
            LayerSpec::Relu => LayerRole::Activation,
            LayerSpec::Flatten => LayerRole::Reshape,
            _ => LayerRole::Params,
        }
    }
}

/// Which backward computations run for each layer under a mask.
///
/// A layer's weight gradient runs iff its unit is active. The gradient with
/// respect to a layer's input runs iff some active parametric layer sits
/// strictly before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackwardPlan {
    pub weight_grad: Vec<bool>,
    pub input_grad: Vec<bool>,
    pub stores_input: Vec<bool>,
}

impl BackwardPlan {
    pub fn new(spec: &NetworkSpec, unit_of_layer: &[Option<usize>], mask: &FreezeMask) -> Self {
        let roles: Vec<LayerRole> = spec.layers.iter().map(LayerRole::of).collect();
        Self::from_roles(&roles, unit_of_layer, mask)
    }

    pub fn from_roles(roles: &[LayerRole], unit_of_layer: &[Option<usize>], mask: &FreezeMask) -> Self {
        let n = roles.len();
        let mut weight_grad = vec![false; n];
        let mut input_grad = vec![false; n];
        let mut stores_input = vec![false; n];
        let mut active_before = false;
        for i in 0..n {
            input_grad[i] = active_before;
            if let Some(u) = unit_of_layer[i] {
                weight_grad[i] = !mask.is_frozen(u);
            }
            stores_input[i] = match roles[i] {
                LayerRole::Params => weight_grad[i],
                LayerRole::Activation => input_grad[i],
                LayerRole::Reshape => false,
            };
            active_before |= weight_grad[i];
        }
        BackwardPlan { weight_grad, input_grad, stores_input }
    }

    /// True if the gradient arriving at the output of layer `i` is consumed.
    pub fn output_grad_needed(&self, i: usize) -> bool {
        self.weight_grad[i] || self.input_grad[i]
    }
}
