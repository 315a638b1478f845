use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::FreezeMask;
use super::spec::{FreezeUnit, LayerSpec, NetworkSpec};
use super::engine::Gradients;
use crate::error::{FrzError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters and momentum buffers of one freeze unit. `tensors[0]` is the
/// primary weight tensor of the unit's parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    pub unit_id: usize,
    pub layer_indices: Vec<usize>,
    pub tensors: Vec<ParamTensor>,
    pub momentum: Vec<Vec<f32>>,
}

impl UnitParams {
    pub fn weight(&self) -> &[f32] {
        &self.tensors[0].data
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Little-endian bytes of every parameter tensor, in order.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.tensors.iter().flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    pub units: Vec<UnitParams>,
    pub seed: u64,
    /// For each layer, the owning unit and the index of its first tensor.
    pub(crate) slots: Vec<Option<(usize, usize)>>,
}

impl NetworkState {
    pub fn unit_of_layer(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.map(|(u, _)| u)).collect()
    }

    pub fn freeze_units(&self) -> Vec<FreezeUnit> {
        self.units
            .iter()
            .map(|u| FreezeUnit { unit_id: u.unit_id, layer_indices: u.layer_indices.clone() })
            .collect()
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    /// Weight and bias (or gamma and beta) of layer `i`.
    pub(crate) fn layer_params(&self, i: usize) -> Option<(&[f32], &[f32])> {
        self.slots[i].map(|(u, t)| {
            let unit = &self.units[u];
            (unit.tensors[t].data.as_slice(), unit.tensors[t + 1].data.as_slice())
        })
    }

    /// Rebuilds the layer→tensor lookup from `units`.
    pub(crate) fn from_parts(spec: NetworkSpec, units: Vec<UnitParams>, seed: u64) -> Result<Self> {
        let mut slots = vec![None; spec.layers.len()];
        for (ui, unit) in units.iter().enumerate() {
            let mut t = 0;
            for &li in &unit.layer_indices {
                if li >= slots.len() || !spec.layers[li].has_params() {
                    return Err(FrzError::Spec(format!("unit {ui} references non-parametric layer {li}")));
                }
                slots[li] = Some((ui, t));
                t += 2;
            }
            if unit.tensors.len() != t || unit.momentum.len() != t {
                return Err(FrzError::Spec(format!("unit {ui} has {} tensors, expected {t}", unit.tensors.len())));
            }
        }
        Ok(NetworkState { spec, units, seed, slots })
    }
}

/// Kaiming-uniform (fan-in) initialisation; biases and shifts start at zero,
/// norm scales at one. A pure function of `(spec, units, seed)`.
pub fn build_network(spec: &NetworkSpec, units: &[FreezeUnit], seed: u64) -> Result<NetworkState> {
    let shapes = spec.shapes()?;
    spec.validate_units(units)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(units.len());
    for unit in units {
        let mut tensors = Vec::new();
        for &li in &unit.layer_indices {
            let prefix = format!("u{}.l{}", unit.unit_id, li);
            match spec.layers[li] {
                LayerSpec::Dense { in_features, out_features } => {
                    let bound = (6.0 / in_features as f64).sqrt() as f32;
                    let data = (0..in_features * out_features).map(|_| rng.random_range(-bound..bound)).collect();
                    tensors.push(ParamTensor { name: format!("{prefix}.weight"), shape: vec![out_features, in_features], data });
                    tensors.push(ParamTensor { name: format!("{prefix}.bias"), shape: vec![out_features], data: vec![0.0; out_features] });
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    let data = (0..fan_in * out_channels).map(|_| rng.random_range(-bound..bound)).collect();
                    tensors.push(ParamTensor {
                        name: format!("{prefix}.weight"),
                        shape: vec![out_channels, in_channels, kernel, kernel],
                        data,
                    });
                    tensors.push(ParamTensor { name: format!("{prefix}.bias"), shape: vec![out_channels], data: vec![0.0; out_channels] });
                }
                LayerSpec::Norm { channels } => {
                    tensors.push(ParamTensor { name: format!("{prefix}.gamma"), shape: vec![channels], data: vec![1.0; channels] });
                    tensors.push(ParamTensor { name: format!("{prefix}.beta"), shape: vec![channels], data: vec![0.0; channels] });
                }
                LayerSpec::Relu | LayerSpec::Flatten => unreachable!("validated units hold parametric layers"),
            }
        }
        let momentum = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        out.push(UnitParams { unit_id: unit.unit_id, layer_indices: unit.layer_indices.clone(), tensors, momentum });
    }
    debug_assert_eq!(shapes.len(), spec.layers.len() + 1);
    NetworkState::from_parts(spec.clone(), out, seed)
}

/// SGD with momentum on the active units: `v ← μv + g`, `w ← w − lr·v`.
pub fn sgd_step(state: &mut NetworkState, grads: &Gradients, lr: f32, momentum: f32, mask: &FreezeMask) -> Result<()> {
    let lrs = vec![lr; state.units.len()];
    sgd_step_per_unit(state, grads, &lrs, momentum, mask)
}

/// As [`sgd_step`] with a learning rate per unit.
pub fn sgd_step_per_unit(
    state: &mut NetworkState,
    grads: &Gradients,
    lrs: &[f32],
    momentum: f32,
    mask: &FreezeMask,
) -> Result<()> {
    if lrs.len() != state.units.len() {
        return Err(FrzError::Contract(format!("{} learning rates for {} units", lrs.len(), state.units.len())));
    }
    if let Some(lr) = lrs.iter().find(|lr| !lr.is_finite() || **lr < 0.0) {
        return Err(FrzError::Config(format!("learning rate must be non-negative and finite, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(FrzError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    for u in 0..state.units.len() {
        if mask.is_frozen(u) == grads.units.contains_key(&u) {
            return Err(FrzError::Contract(format!(
                "gradients must cover exactly the active units (unit {u}, frozen={})",
                mask.is_frozen(u)
            )));
        }
    }
    for (&u, unit_grads) in &grads.units {
        let lr = lrs[u];
        let unit = &mut state.units[u];
        for ((param, vel), g) in unit.tensors.iter_mut().zip(unit.momentum.iter_mut()).zip(unit_grads) {
            for ((w, v), &gi) in param.data.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = momentum * *v + gi;
                *w -= lr * *v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Shape, LayerSpec};
    use std::collections::BTreeMap;

    fn scalar_net() -> NetworkState {
        let spec = NetworkSpec::new(Shape::Flat(1), vec![LayerSpec::Dense { in_features: 1, out_features: 1 }]);
        let units = spec.default_units();
        let mut s = build_network(&spec, &units, 0).unwrap();
        s.units[0].tensors[0].data[0] = 1.0;
        s
    }

    fn scalar_grad(g: f32) -> Gradients {
        let mut units = BTreeMap::new();
        units.insert(0, vec![vec![g], vec![0.0]]);
        Gradients { units, flops: 0 }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::mlp(&[4, 2]);
        let a = build_network(&spec, &spec.default_units(), 7).unwrap();
        let b = build_network(&spec, &spec.default_units(), 7).unwrap();
        assert_eq!(a.units[0].param_bytes(), b.units[0].param_bytes());
        let c = build_network(&spec, &spec.default_units(), 8).unwrap();
        assert_ne!(a.units[0].param_bytes(), c.units[0].param_bytes());
    }

    #[test]
    fn kaiming_bound_respected() {
        let spec = NetworkSpec::mlp(&[24, 50]);
        let s = build_network(&spec, &spec.default_units(), 1).unwrap();
        let bound = (6.0f32 / 24.0).sqrt();
        assert!(s.units[0].weight().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn plain_sgd_arithmetic() {
        let mut s = scalar_net();
        let mask = FreezeMask::empty(1);
        sgd_step(&mut s, &scalar_grad(0.5), 0.1, 0.0, &mask).unwrap();
        assert!((s.units[0].tensors[0].data[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps_match_unrolled_recurrence() {
        // v1 = g1, w1 = w0 - lr g1; v2 = μ g1 + g2, w2 = w1 - lr (μ g1 + g2)
        let (w0, lr, mu, g1, g2) = (1.0f64, 0.1, 0.9, 0.5, -0.2);
        let w2 = w0 - lr * g1 - lr * (mu * g1 + g2);
        let mut s = scalar_net();
        let mask = FreezeMask::empty(1);
        sgd_step(&mut s, &scalar_grad(g1 as f32), lr as f32, mu as f32, &mask).unwrap();
        sgd_step(&mut s, &scalar_grad(g2 as f32), lr as f32, mu as f32, &mask).unwrap();
        assert!((s.units[0].tensors[0].data[0] as f64 - w2).abs() < 1e-6);
        assert!((s.units[0].momentum[0][0] as f64 - (mu * g1 + g2)).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut s = scalar_net();
        let before = s.units[0].param_bytes();
        sgd_step(&mut s, &scalar_grad(3.0), 0.0, 0.9, &FreezeMask::empty(1)).unwrap();
        assert_eq!(before, s.units[0].param_bytes());
    }

    #[test]
    fn negative_lr_is_config_error() {
        let mut s = scalar_net();
        let e = sgd_step(&mut s, &scalar_grad(1.0), -0.1, 0.0, &FreezeMask::empty(1)).unwrap_err();
        assert!(matches!(e, FrzError::Config(_)));
    }

    #[test]
    fn gradients_for_frozen_unit_rejected() {
        let mut s = scalar_net();
        let mask = FreezeMask::empty(1).with_frozen(&[0], 0).unwrap();
        let e = sgd_step(&mut s, &scalar_grad(1.0), 0.1, 0.0, &mask).unwrap_err();
        assert!(matches!(e, FrzError::Contract(_)));
    }
}
