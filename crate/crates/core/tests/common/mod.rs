//! Independent reference implementations used as test oracles. Everything
//! here is written from the layer definitions in plain f64 loops and shares
//! no code with the library's kernels.
#![allow(dead_code)]

use frz_core::nn::{LayerSpec, NetworkSpec, NetworkState, Shape};
use frz_core::predictor::{PredictorParams, Preprocess, TrainRecord};
use rand::Rng;

fn tensor<'a>(state: &'a NetworkState, layer: usize, what: &str) -> &'a [f32] {
    let suffix = format!(".l{layer}.{what}");
    state
        .units
        .iter()
        .flat_map(|u| &u.tensors)
        .find(|t| t.name.ends_with(&suffix))
        .map(|t| t.data.as_slice())
        .unwrap_or_else(|| panic!("no tensor {suffix}"))
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Forward pass of one sample in f64.
pub fn net_forward_f64(state: &NetworkState, x: &[f64]) -> Vec<f64> {
    net_forward_signs_f64(state, x, &mut Vec::new())
}

/// [`net_forward_f64`] that also appends the on/off state of every ReLU input.
pub fn net_forward_signs_f64(state: &NetworkState, x: &[f64], signs: &mut Vec<bool>) -> Vec<f64> {
    let mut shape = state.spec.input;
    let mut x = x.to_vec();
    for (i, layer) in state.spec.layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Dense { in_features, out_features } => {
                let w = tensor(state, i, "weight");
                let b = tensor(state, i, "bias");
                (0..out_features)
                    .map(|o| b[o] as f64 + (0..in_features).map(|j| w[o * in_features + j] as f64 * x[j]).sum::<f64>())
                    .collect()
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let Shape::Image { height, width, .. } = shape else { panic!("conv on flat input") };
                let (oh, ow) = (out_size(height, kernel, stride, padding), out_size(width, kernel, stride, padding));
                let w = tensor(state, i, "weight");
                let b = tensor(state, i, "bias");
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[o] as f64;
                            for c in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= height || ix as usize >= width {
                                            continue;
                                        }
                                        let wv = w[((o * in_channels + c) * kernel + ky) * kernel + kx] as f64;
                                        acc += wv * x[(c * height + iy as usize) * width + ix as usize];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                y
            }
            LayerSpec::Norm { channels } => {
                let g = tensor(state, i, "gamma");
                let b = tensor(state, i, "beta");
                let per = shape.numel() / channels;
                x.iter().enumerate().map(|(j, &v)| g[j / per] as f64 * v + b[j / per] as f64).collect()
            }
            LayerSpec::Relu => {
                signs.extend(x.iter().map(|&v| v > 0.0));
                x.iter().map(|&v| v.max(0.0)).collect()
            }
            LayerSpec::Flatten => x,
        };
        shape = layer.output_shape(shape).unwrap();
    }
    x
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[y] - m - z.ln()
}

/// Mean softmax cross-entropy over a batch, in f64.
pub fn net_loss_f64(state: &NetworkState, inputs: &[f32], labels: &[usize]) -> f64 {
    net_loss_signs_f64(state, inputs, labels).0
}

/// Loss together with the ReLU sign pattern of the whole batch.
pub fn net_loss_signs_f64(state: &NetworkState, inputs: &[f32], labels: &[usize]) -> (f64, Vec<bool>) {
    let d = state.spec.input.numel();
    let n = labels.len();
    let mut signs = Vec::new();
    let total: f64 = (0..n)
        .map(|s| {
            let x: Vec<f64> = inputs[s * d..(s + 1) * d].iter().map(|&v| v as f64).collect();
            -log_softmax_at(&net_forward_signs_f64(state, &x, &mut signs), labels[s])
        })
        .sum();
    (total / n as f64, signs)
}

fn mlp_f64(m: &frz_core::predictor::Mlp, x: &[f64], signs: &mut Vec<bool>) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = m.layers.len() - 1;
    for (li, l) in m.layers.iter().enumerate() {
        let mut y: Vec<f64> = (0..l.out)
            .map(|o| l.bias[o] as f64 + (0..l.inp).map(|j| l.weight[o * l.inp + j] as f64 * h[j]).sum::<f64>())
            .collect();
        if li < last {
            signs.extend(y.iter().map(|&v| v > 0.0));
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

fn preprocess_f64(pre: Preprocess, seq: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let stats = |x: &[f32]| {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 })
    };
    match pre {
        Preprocess::None => seq.iter().map(|s| s.iter().map(|&v| v as f64).collect()).collect(),
        Preprocess::Standardize => seq
            .iter()
            .map(|s| {
                let (m, k) = stats(s);
                s.iter().map(|&v| (v as f64 - m) * k).collect()
            })
            .collect(),
        Preprocess::Delta => seq
            .windows(2)
            .map(|w| {
                let (_, k) = stats(&w[1]);
                w[1].iter().zip(&w[0]).map(|(&c, &p)| (c as f64 - p as f64) * k).collect()
            })
            .collect(),
    }
}

/// Attention weights, context and class probabilities, all in f64.
pub fn predictor_forward_f64(p: &PredictorParams, seq: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>, [f64; 2]) {
    let (alphas, context, probs, _) = predictor_trace_f64(p, seq);
    (alphas, context, probs)
}

/// Like [`predictor_forward_f64`], also returning which hidden ReLUs were on.
pub fn predictor_trace_f64(p: &PredictorParams, seq: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>, [f64; 2], Vec<bool>) {
    let mut signs = Vec::new();
    let rows = preprocess_f64(p.preprocess, seq);
    let keys: Vec<Vec<f64>> = rows.iter().map(|r| mlp_f64(&p.key, r, &mut signs)).collect();
    let values: Vec<Vec<f64>> = rows.iter().map(|r| mlp_f64(&p.value, r, &mut signs)).collect();
    let q = mlp_f64(&p.query, rows.last().unwrap(), &mut signs);
    let scores: Vec<f64> = keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let alphas: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut context = vec![0.0; p.dims.embed];
    for (a, v) in alphas.iter().zip(&values) {
        context.iter_mut().zip(v).for_each(|(c, x)| *c += a * x);
    }
    let logits = mlp_f64(&p.head, &context, &mut signs);
    let lp0 = log_softmax_at(&logits, 0);
    let lp1 = log_softmax_at(&logits, 1);
    (alphas, context, [lp0.exp(), lp1.exp()], signs)
}

pub fn predictor_loss_f64(p: &PredictorParams, r: &TrainRecord, w: [f64; 2]) -> f64 {
    predictor_loss_signs_f64(p, r, w).0
}

/// Loss together with the hidden ReLU sign pattern, for spotting kinks.
pub fn predictor_loss_signs_f64(p: &PredictorParams, r: &TrainRecord, w: [f64; 2]) -> (f64, Vec<bool>) {
    let (_, _, probs, signs) = predictor_trace_f64(p, &r.sequence);
    (-w[r.label as usize] * probs[r.label as usize].ln(), signs)
}

/// Backward-pass cost by walking the layers from the loss towards the
/// input and charging each operation that has to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkedCost {
    pub fwd: u64,
    pub bwd: u64,
    pub act_bytes: u64,
}

pub fn walk_cost(spec: &NetworkSpec, unit_of_layer: &[Option<usize>], frozen: &[bool], batch: u64) -> WalkedCost {
    let mut shapes = vec![spec.input];
    for l in &spec.layers {
        shapes.push(l.output_shape(*shapes.last().unwrap()).unwrap());
    }
    // MACs of a forward pass through layer i for one sample.
    let macs = |i: usize| -> u64 {
        match spec.layers[i] {
            LayerSpec::Dense { in_features, out_features } => (in_features * out_features) as u64,
            LayerSpec::Conv2d { in_channels, kernel, .. } => {
                let mut n = 0u64;
                // one MAC per (output element, input channel, kernel tap)
                for _ in 0..shapes[i + 1].numel() {
                    n += (in_channels * kernel * kernel) as u64;
                }
                n
            }
            _ => 0,
        }
    };
    let elementwise = |i: usize| -> u64 {
        match spec.layers[i] {
            LayerSpec::Norm { .. } => 2 * shapes[i].numel() as u64,
            _ => 0,
        }
    };
    let active = |i: usize| unit_of_layer[i].map(|u| !frozen[u]).unwrap_or(false);
    let mut fwd = 0;
    for i in 0..spec.layers.len() {
        fwd += batch * (2 * macs(i) + elementwise(i));
    }
    let mut bwd = 0;
    let mut bytes = 0;
    // The gradient keeps flowing towards the input only while some active
    // layer remains upstream.
    for i in (0..spec.layers.len()).rev() {
        let upstream_active = (0..i).any(active);
        let cost = batch * (2 * macs(i) + elementwise(i));
        let input_bytes = 4 * batch * shapes[i].numel() as u64;
        if active(i) {
            bwd += cost;
            bytes += input_bytes;
        }
        if upstream_active {
            bwd += cost;
            if matches!(spec.layers[i], LayerSpec::Relu) {
                bytes += input_bytes;
            }
        }
    }
    WalkedCost { fwd, bwd, act_bytes: bytes }
}

/// Random sequential network with between 1 and `max_units` parametric
/// layers. Image inputs get a conv stack before flattening.
pub fn random_network(rng: &mut impl Rng, max_units: usize, small: bool) -> NetworkSpec {
    let units = rng.random_range(1..=max_units);
    let mut layers = Vec::new();
    let conv_units = if rng.random_bool(0.5) { rng.random_range(0..=units.min(3)) } else { 0 };
    let dim = if small { 3 } else { 6 };
    let (input, mut cur) = if conv_units > 0 {
        let c = rng.random_range(1..=2);
        let h = rng.random_range(dim..=dim + 2);
        let w = rng.random_range(dim..=dim + 2);
        (Shape::Image { channels: c, height: h, width: w }, Shape::Image { channels: c, height: h, width: w })
    } else {
        let n = rng.random_range(2..=if small { 5 } else { 12 });
        (Shape::Flat(n), Shape::Flat(n))
    };
    for u in 0..units {
        let last = u + 1 == units;
        if u < conv_units {
            let Shape::Image { channels, height, width } = cur else { unreachable!() };
            let oc = rng.random_range(1..=3);
            let k = rng.random_range(1..=3.min(height).min(width));
            let stride = if height >= 4 && width >= 4 { rng.random_range(1..=2) } else { 1 };
            let padding = rng.random_range(0..=k / 2);
            let l = LayerSpec::Conv2d { in_channels: channels, out_channels: oc, kernel: k, stride, padding };
            cur = l.output_shape(cur).unwrap();
            layers.push(l);
            if rng.random_bool(0.5) {
                layers.push(LayerSpec::Norm { channels: oc });
            }
            if rng.random_bool(0.8) {
                layers.push(LayerSpec::Relu);
            }
            if u + 1 == conv_units {
                layers.push(LayerSpec::Flatten);
                cur = Shape::Flat(cur.numel());
            }
        } else {
            let Shape::Flat(n) = cur else { unreachable!() };
            let out = if last { rng.random_range(2..=4) } else { rng.random_range(2..=if small { 5 } else { 10 }) };
            layers.push(LayerSpec::Dense { in_features: n, out_features: out });
            cur = Shape::Flat(out);
            if !last && rng.random_bool(0.3) {
                layers.push(LayerSpec::Norm { channels: out });
            }
            if !last && rng.random_bool(0.8) {
                layers.push(LayerSpec::Relu);
            }
        }
    }
    if let Shape::Image { .. } = cur {
        let classes = rng.random_range(2..=3);
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { in_features: cur.numel(), out_features: classes });
    }
    NetworkSpec::new(input, layers)
}

/// CKA through centred Gram matrices: `tr(KHLH) / sqrt(tr(KHKH)·tr(LHLH))`
/// with `H = I − 11ᵀ/n` built explicitly.
pub fn cka_oracle(x: &[f64], dx: usize, y: &[f64], dy: usize, n: usize, center: bool) -> f64 {
    let gram = |a: &[f64], d: usize| -> Vec<f64> {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
            }
        }
        g
    };
    let h: Vec<f64> = (0..n * n)
        .map(|ij| {
            let id = if ij / n == ij % n { 1.0 } else { 0.0 };
            if center { id - 1.0 / n as f64 } else { id }
        })
        .collect();
    let mul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    c[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        c
    };
    let k = mul(&mul(&h, &gram(x, dx)), &h);
    let l = mul(&mul(&h, &gram(y, dy)), &h);
    let tr = |a: &[f64], b: &[f64]| -> f64 { (0..n * n).map(|ij| a[ij] * b[(ij % n) * n + ij / n]).sum() };
    tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt()
}

/// Random `d × d` orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q.concat()
}

/// `a (n×d) · q (d×d)`.
pub fn right_multiply(a: &[f64], n: usize, q: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for j in 0..d {
            out[r * d + j] = (0..d).map(|k| a[r * d + k] * q[k * d + j]).sum();
        }
    }
    out
}
