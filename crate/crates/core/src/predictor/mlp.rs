use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{matmul, matmul_nt, matmul_tn};

/// Fully connected layer, `weight` stored `out × inp` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn kaiming(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inp as f64).sqrt() as f32;
        let weight = (0..inp * out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear { inp, out, weight, bias: vec![0.0; out] }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear { inp, out, weight: vec![0.0; inp * out], bias: vec![0.0; out] }
    }

    /// `rows × inp` → `rows × out`.
    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut y: Vec<f32> = (0..rows).flat_map(|_| self.bias.iter().copied()).collect();
        matmul_nt(rows, self.inp, self.out, x, &self.weight, &mut y, 1.0);
        y
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.inp * self.out) as u64
    }
}

/// Perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs kept for the backward pass (post-ReLU for hidden layers).
pub struct MlpTape {
    rows: usize,
    inputs: Vec<Vec<f32>>,
}

impl Mlp {
    pub fn kaiming(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Mlp { layers: dims.windows(2).map(|w| Linear::kaiming(w[0], w[1], rng)).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp { layers: self.layers.iter().map(|l| Linear::zeros(l.inp, l.out)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.out));
        d
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        self.forward_taped(x, rows).0
    }

    pub fn forward_taped(&self, x: &[f32], rows: usize) -> (Vec<f32>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h, rows);
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpTape { rows, inputs })
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.flops(rows)).sum()
    }

    /// Accumulates parameter gradients into `grad` given the output gradient;
    /// returns the gradient w.r.t. the input when `want_input` is set.
    pub fn backward(&self, tape: &MlpTape, dy: &[f32], grad: &mut Mlp, want_input: bool) -> Option<Vec<f32>> {
        let rows = tape.rows;
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &tape.inputs[i];
            let gl = &mut grad.layers[i];
            matmul_tn(layer.out, rows, layer.inp, &g, x, &mut gl.weight, 1.0);
            for row in g.chunks(layer.out) {
                gl.bias.iter_mut().zip(row).for_each(|(b, v)| *b += v);
            }
            if i == 0 && !want_input {
                return None;
            }
            let mut dx = vec![0.0; rows * layer.inp];
            matmul(rows, layer.out, layer.inp, &g, &layer.weight, &mut dx, 0.0);
            if i > 0 {
                // x is the ReLU output of the previous layer.
                dx.iter_mut().zip(x).for_each(|(d, &xv)| if xv <= 0.0 { *d = 0.0 });
            }
            g = dx;
        }
        Some(g)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn params(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}
