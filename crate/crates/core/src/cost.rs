//! FLOPs and activation-memory accounting for training under a freeze mask.
//!
//! Conventions: one multiply-accumulate is two FLOPs, activation functions and
//! reshapes are free. For dense and conv layers the weight-gradient and
//! input-gradient costs each equal the forward cost.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};
use crate::nn::{BackwardPlan, FreezeMask, FreezeUnit, LayerRole, LayerSpec, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub fwd_flops: u64,
    pub wgrad_flops: u64,
    pub agrad_flops: u64,
    /// Bytes of the layer's input activation if it is retained.
    pub act_bytes: u64,
    pub param_bytes: u64,
}

/// Per-layer costs of a network at a fixed batch size together with the
/// layer→unit map needed to apply a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub layers: Vec<LayerCost>,
    pub roles: Vec<LayerRole>,
    pub unit_of_layer: Vec<Option<usize>>,
    pub num_units: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IterationCost {
    pub fwd: u64,
    pub bwd: u64,
    pub act_bytes: u64,
    /// Gradient buffers of active units.
    pub grad_bytes: u64,
}

/// FLOP and memory cost of every layer for a batch of `batch_size` samples.
pub fn layer_costs(spec: &NetworkSpec, batch_size: usize) -> Result<Vec<LayerCost>> {
    let shapes = spec.shapes()?;
    let b = batch_size as u64;
    Ok(spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let input = shapes[i].numel() as u64;
            let output = shapes[i + 1];
            match *layer {
                LayerSpec::Dense { in_features, out_features } => {
                    let f = 2 * b * (in_features * out_features) as u64;
                    LayerCost {
                        fwd_flops: f,
                        wgrad_flops: f,
                        agrad_flops: f,
                        act_bytes: 4 * b * input,
                        param_bytes: 4 * ((in_features + 1) * out_features) as u64,
                    }
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let positions = (output.numel() / out_channels) as u64;
                    let f = 2 * b * positions * (in_channels * kernel * kernel * out_channels) as u64;
                    LayerCost {
                        fwd_flops: f,
                        wgrad_flops: f,
                        agrad_flops: f,
                        act_bytes: 4 * b * input,
                        param_bytes: 4 * ((in_channels * kernel * kernel + 1) * out_channels) as u64,
                    }
                }
                LayerSpec::Norm { channels } => {
                    let f = 2 * b * input;
                    LayerCost { fwd_flops: f, wgrad_flops: f, agrad_flops: f, act_bytes: 4 * b * input, param_bytes: 8 * channels as u64 }
                }
                LayerSpec::Relu => LayerCost { act_bytes: 4 * b * input, ..LayerCost::default() },
                LayerSpec::Flatten => LayerCost::default(),
            }
        })
        .collect())
}

impl CostModel {
    pub fn new(spec: &NetworkSpec, units: &[FreezeUnit], batch_size: usize) -> Result<Self> {
        spec.validate_units(units)?;
        let mut unit_of_layer = vec![None; spec.layers.len()];
        for u in units {
            for &l in &u.layer_indices {
                unit_of_layer[l] = Some(u.unit_id);
            }
        }
        Ok(CostModel {
            layers: layer_costs(spec, batch_size)?,
            roles: spec.layers.iter().map(LayerRole::of).collect(),
            unit_of_layer,
            num_units: units.len(),
        })
    }

    /// Forward FLOPs of one iteration; independent of any mask.
    pub fn forward_flops(&self) -> u64 {
        self.layers.iter().map(|c| c.fwd_flops).sum()
    }

    pub fn iteration_cost(&self, mask: &FreezeMask) -> Result<IterationCost> {
        iteration_cost(self, mask)
    }
}

/// Cost of one training iteration under `mask`. Forward always runs in full;
/// weight gradients are paid for active units, input gradients for layers
/// preceded by at least one active parametric layer.
pub fn iteration_cost(model: &CostModel, mask: &FreezeMask) -> Result<IterationCost> {
    if mask.total_units() != model.num_units {
        return Err(FrzError::Contract(format!(
            "mask covers {} units, cost model has {}",
            mask.total_units(),
            model.num_units
        )));
    }
    if let Some(u) = mask.frozen_units().find(|&u| u >= model.num_units) {
        return Err(FrzError::Contract(format!("unit {u} out of range")));
    }
    let plan = BackwardPlan::from_roles(&model.roles, &model.unit_of_layer, mask);
    let mut cost = IterationCost { fwd: model.forward_flops(), ..IterationCost::default() };
    for (i, c) in model.layers.iter().enumerate() {
        if plan.weight_grad[i] {
            cost.bwd += c.wgrad_flops;
            cost.grad_bytes += c.param_bytes;
        }
        if plan.input_grad[i] {
            cost.bwd += c.agrad_flops;
        }
        if plan.stores_input[i] {
            cost.act_bytes += c.act_bytes;
        }
    }
    Ok(cost)
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub epoch: u64,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub predictor_flops: u64,
    pub act_bytes: u64,
    pub frozen_units: usize,
    pub train_loss: f64,
}

pub const TRACE_CSV_HEADER: &str = "iteration,epoch,fwd_flops,bwd_flops,predictor_flops,act_bytes,frozen_units,train_loss";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub predictor_flops: u64,
    pub peak_act_bytes: u64,
    pub rows: Vec<TraceRow>,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    pub fn accumulate(&mut self, row: TraceRow) {
        self.fwd_flops += row.fwd_flops;
        self.bwd_flops += row.bwd_flops;
        self.predictor_flops += row.predictor_flops;
        self.peak_act_bytes = self.peak_act_bytes.max(row.act_bytes);
        self.rows.push(row);
    }

    /// Adds predictor FLOPs spent outside a training iteration to the last row.
    pub fn add_predictor_flops(&mut self, flops: u64) {
        self.predictor_flops += flops;
        if let Some(r) = self.rows.last_mut() {
            r.predictor_flops += flops;
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.fwd_flops + self.bwd_flops + self.predictor_flops
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration, r.epoch, r.fwd_flops, r.bwd_flops, r.predictor_flops, r.act_bytes, r.frozen_units, r.train_loss
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
