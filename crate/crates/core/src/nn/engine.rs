use std::collections::BTreeMap;

use super::mask::{BackwardPlan, FreezeMask};
use super::spec::{LayerSpec, Shape};
use super::state::NetworkState;
use super::Batch;
use crate::error::{FrzError, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn};

/// Layer inputs retained for the backward pass under one mask.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub batch: usize,
    pub plan: BackwardPlan,
    pub inputs: Vec<Option<Vec<f32>>>,
    /// Forward FLOPs executed while building the cache.
    pub flops: u64,
    frozen: Vec<bool>,
}

impl ActivationCache {
    pub fn stored_bytes(&self) -> usize {
        self.inputs.iter().flatten().map(|v| v.len() * 4).sum()
    }
}

/// Parameter gradients keyed by unit, aligned with `UnitParams::tensors`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub units: BTreeMap<usize, Vec<Vec<f32>>>,
    /// Backward FLOPs actually executed.
    pub flops: u64,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// L2 norm of a unit's full gradient.
    pub fn unit_norm(&self, unit: usize) -> Option<f64> {
        self.units.get(&unit).map(|ts| {
            ts.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
        })
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(layer: LayerSpec, input: Shape, output: Shape) -> Self {
        match (layer, input, output) {
            (
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding },
                Shape::Image { height, width, .. },
                Shape::Image { height: oh, width: ow, .. },
            ) => ConvGeom { cin: in_channels, cout: out_channels, k: kernel, stride, pad: padding, h: height, w: width, oh, ow },
            _ => unreachable!("conv geometry on validated spec"),
        }
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn layer_forward(
    state: &NetworkState,
    i: usize,
    input: Shape,
    output: Shape,
    x: &[f32],
    batch: usize,
    flops: &mut u64,
) -> Vec<f32> {
    let layer = state.spec.layers[i];
    match layer {
        LayerSpec::Dense { in_features, out_features } => {
            let (w, b) = state.layer_params(i).expect("dense params");
            let mut y: Vec<f32> = (0..batch).flat_map(|_| b.iter().copied()).collect();
            matmul_nt(batch, in_features, out_features, x, w, &mut y, 1.0);
            *flops += 2 * (batch * in_features * out_features) as u64;
            y
        }
        LayerSpec::Conv2d { .. } => {
            let (w, b) = state.layer_params(i).expect("conv params");
            let g = ConvGeom::new(layer, input, output);
            let (p, patch) = (g.positions(), g.patch());
            let mut col = vec![0.0; patch * p];
            let mut y = vec![0.0; batch * g.cout * p];
            for s in 0..batch {
                g.im2col(&x[s * input.numel()..(s + 1) * input.numel()], &mut col);
                let ys = &mut y[s * g.cout * p..(s + 1) * g.cout * p];
                for (c, row) in ys.chunks_mut(p).enumerate() {
                    row.fill(b[c]);
                }
                matmul(g.cout, patch, p, w, &col, ys, 1.0);
            }
            *flops += 2 * (batch * g.cout * patch * p) as u64;
            y
        }
        LayerSpec::Norm { .. } => {
            let (gamma, beta) = state.layer_params(i).expect("norm params");
            let (channels, spatial) = input.channels();
            let mut y = x.to_vec();
            for sample in y.chunks_mut(channels * spatial) {
                for (c, plane) in sample.chunks_mut(spatial).enumerate() {
                    plane.iter_mut().for_each(|v| *v = gamma[c] * *v + beta[c]);
                }
            }
            *flops += 2 * (batch * input.numel()) as u64;
            y
        }
        LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerSpec::Flatten => x.to_vec(),
    }
}

fn check_input(state: &NetworkState, inputs: &[f32], batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(FrzError::Contract("batch must contain at least one sample".into()));
    }
    if inputs.len() != batch * state.spec.input.numel() {
        return Err(FrzError::Contract(format!(
            "batch input has {} values, expected {}×{}",
            inputs.len(),
            batch,
            state.spec.input.numel()
        )));
    }
    Ok(())
}

fn check_finite(y: &[f32], layer: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FrzError::NumericOverflow { layer })
    }
}

/// Runs every layer (frozen or not) and keeps the inputs that the backward
/// pass under `mask` will read.
pub fn forward(state: &NetworkState, batch: &Batch, mask: &FreezeMask) -> Result<(ActivationCache, Vec<f32>)> {
    let n = batch.len();
    check_input(state, &batch.inputs, n)?;
    let shapes = state.spec.shapes()?;
    let classes = shapes.last().unwrap().numel();
    if let Some(l) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(FrzError::Contract(format!("label {l} out of range for {classes} classes")));
    }
    let plan = BackwardPlan::new(&state.spec, &state.unit_of_layer(), mask);
    let mut inputs = vec![None; state.spec.layers.len()];
    let mut flops = 0;
    let mut x = batch.inputs.clone();
    for i in 0..state.spec.layers.len() {
        let y = layer_forward(state, i, shapes[i], shapes[i + 1], &x, n, &mut flops);
        check_finite(&y, i)?;
        if plan.stores_input[i] {
            inputs[i] = Some(x);
        }
        x = y;
    }
    let frozen = (0..state.num_units()).map(|u| mask.is_frozen(u)).collect();
    Ok((ActivationCache { batch: n, plan, inputs, flops, frozen }, x))
}

/// Logits for `batch` samples without retaining activations.
pub fn infer(state: &NetworkState, inputs: &[f32], batch: usize) -> Result<Vec<f32>> {
    Ok(forward_outputs(state, inputs, batch)?.pop().unwrap())
}

/// Output of every layer for `batch` samples (entry `i` is layer `i`'s output).
pub fn forward_outputs(state: &NetworkState, inputs: &[f32], batch: usize) -> Result<Vec<Vec<f32>>> {
    check_input(state, inputs, batch)?;
    let shapes = state.spec.shapes()?;
    let mut flops = 0;
    let mut outs: Vec<Vec<f32>> = Vec::with_capacity(state.spec.layers.len());
    for i in 0..state.spec.layers.len() {
        let x = if i == 0 { inputs } else { outs[i - 1].as_slice() };
        let y = layer_forward(state, i, shapes[i], shapes[i + 1], x, batch, &mut flops);
        check_finite(&y, i)?;
        outs.push(y);
    }
    Ok(outs)
}

/// Backward pass restricted by `mask`: weight gradients only for active
/// units, input gradients only where an active parametric layer lies
/// earlier in the chain.
pub fn backward(state: &NetworkState, cache: &ActivationCache, dlogits: &[f32], mask: &FreezeMask) -> Result<Gradients> {
    let frozen: Vec<bool> = (0..state.num_units()).map(|u| mask.is_frozen(u)).collect();
    if frozen != cache.frozen {
        return Err(FrzError::Contract("activation cache was built under a different freeze mask".into()));
    }
    let shapes = state.spec.shapes()?;
    let batch = cache.batch;
    if dlogits.len() != batch * shapes.last().unwrap().numel() {
        return Err(FrzError::Contract("dlogits shape does not match the cached batch".into()));
    }
    let plan = &cache.plan;
    let mut grads = Gradients::default();
    let mut g = dlogits.to_vec();
    for i in (0..state.spec.layers.len()).rev() {
        if !plan.output_grad_needed(i) {
            break;
        }
        let layer = state.spec.layers[i];
        let (input, output) = (shapes[i], shapes[i + 1]);
        let stored = || {
            cache.inputs[i]
                .as_deref()
                .ok_or_else(|| FrzError::Contract(format!("layer {i} input missing from activation cache")))
        };
        let mut dx: Option<Vec<f32>> = None;
        match layer {
            LayerSpec::Dense { in_features, out_features } => {
                let (w, _) = state.layer_params(i).expect("dense params");
                if plan.weight_grad[i] {
                    let x = stored()?;
                    let mut dw = vec![0.0; out_features * in_features];
                    matmul_tn(out_features, batch, in_features, &g, x, &mut dw, 0.0);
                    let mut db = vec![0.0; out_features];
                    for row in g.chunks(out_features) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    grads.flops += 2 * (batch * in_features * out_features) as u64;
                    push_grad(state, &mut grads, i, dw, db);
                }
                if plan.input_grad[i] {
                    let mut d = vec![0.0; batch * in_features];
                    matmul(batch, out_features, in_features, &g, w, &mut d, 0.0);
                    grads.flops += 2 * (batch * in_features * out_features) as u64;
                    dx = Some(d);
                }
            }
            LayerSpec::Conv2d { .. } => {
                let (w, _) = state.layer_params(i).expect("conv params");
                let geo = ConvGeom::new(layer, input, output);
                let (p, patch) = (geo.positions(), geo.patch());
                let out_len = geo.cout * p;
                let per_sample = 2 * (geo.cout * patch * p) as u64;
                if plan.weight_grad[i] {
                    let x = stored()?;
                    let mut col = vec![0.0; patch * p];
                    let mut dw = vec![0.0; geo.cout * patch];
                    let mut db = vec![0.0; geo.cout];
                    for s in 0..batch {
                        geo.im2col(&x[s * input.numel()..(s + 1) * input.numel()], &mut col);
                        let gs = &g[s * out_len..(s + 1) * out_len];
                        matmul_nt(geo.cout, p, patch, gs, &col, &mut dw, 1.0);
                        for (c, row) in gs.chunks(p).enumerate() {
                            db[c] += row.iter().sum::<f32>();
                        }
                    }
                    grads.flops += per_sample * batch as u64;
                    push_grad(state, &mut grads, i, dw, db);
                }
                if plan.input_grad[i] {
                    let mut dcol = vec![0.0; patch * p];
                    let mut d = vec![0.0; batch * input.numel()];
                    for s in 0..batch {
                        let gs = &g[s * out_len..(s + 1) * out_len];
                        matmul_tn(patch, geo.cout, p, w, gs, &mut dcol, 0.0);
                        geo.col2im(&dcol, &mut d[s * input.numel()..(s + 1) * input.numel()]);
                    }
                    grads.flops += per_sample * batch as u64;
                    dx = Some(d);
                }
            }
            LayerSpec::Norm { .. } => {
                let (gamma, _) = state.layer_params(i).expect("norm params");
                let (channels, spatial) = input.channels();
                let work = 2 * (batch * input.numel()) as u64;
                if plan.weight_grad[i] {
                    let x = stored()?;
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for (gs, xs) in g.chunks(channels * spatial).zip(x.chunks(channels * spatial)) {
                        for c in 0..channels {
                            let plane = c * spatial..(c + 1) * spatial;
                            for (gv, xv) in gs[plane.clone()].iter().zip(&xs[plane]) {
                                dgamma[c] += gv * xv;
                                dbeta[c] += gv;
                            }
                        }
                    }
                    grads.flops += work;
                    push_grad(state, &mut grads, i, dgamma, dbeta);
                }
                if plan.input_grad[i] {
                    let mut d = g.clone();
                    for sample in d.chunks_mut(channels * spatial) {
                        for (c, plane) in sample.chunks_mut(spatial).enumerate() {
                            plane.iter_mut().for_each(|v| *v *= gamma[c]);
                        }
                    }
                    grads.flops += work;
                    dx = Some(d);
                }
            }
            LayerSpec::Relu => {
                if plan.input_grad[i] {
                    let x = stored()?;
                    dx = Some(g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect());
                }
            }
            LayerSpec::Flatten => {
                if plan.input_grad[i] {
                    dx = Some(std::mem::take(&mut g));
                }
            }
        }
        match dx {
            Some(d) => g = d,
            None => break,
        }
    }
    Ok(grads)
}

fn push_grad(state: &NetworkState, grads: &mut Gradients, layer: usize, a: Vec<f32>, b: Vec<f32>) {
    let (unit, t) = state.slots[layer].expect("parametric layer has a slot");
    let n = state.units[unit].tensors.len();
    let entry = grads.units.entry(unit).or_insert_with(|| vec![Vec::new(); n]);
    entry[t] = a;
    entry[t + 1] = b;
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize]) -> (f64, Vec<f32>) {
    let n = labels.len();
    let classes = logits.len() / n;
    let mut dlogits = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss += z.ln() + m - row[y] as f64;
        for c in 0..classes {
            let p = (row[c] as f64 - m).exp() / z;
            let t = if c == y { 1.0 } else { 0.0 };
            dlogits[s * classes + c] = ((p - t) / n as f64) as f32;
        }
    }
    (loss / n as f64, dlogits)
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(state: &NetworkState, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Err(FrzError::Config("cannot evaluate on an empty dataset".into()));
    }
    let per = state.spec.input.numel();
    let classes = state.spec.num_classes()?;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let logits = infer(state, &data.inputs[start * per..end * per], end - start)?;
        for (row, &y) in logits.chunks(classes).zip(&data.labels[start..end]) {
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
