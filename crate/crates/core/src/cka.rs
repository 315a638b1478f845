//! Linear centred kernel alignment, stabilisation detection and the
//! CKA-derived freeze labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};

/// `rows` probe samples by `cols` flattened features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows < 2 {
            return Err(FrzError::Contract(format!("activation matrix needs at least 2 rows, got {rows}")));
        }
        if data.len() != rows * cols {
            return Err(FrzError::Contract(format!("{} values for a {rows}×{cols} matrix", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FrzError::Degenerate("activation matrix has non-finite entries".into()));
        }
        Ok(ActivationMatrix { rows, cols, data })
    }
}

/// Similarity of two representations of the same probe rows:
/// `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)`, after column mean-centring when
/// `center` is set.
pub fn cka(x: &ActivationMatrix, y: &ActivationMatrix, center: bool) -> Result<f64> {
    let xs: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
    if x.rows != y.rows {
        return Err(FrzError::Contract(format!("row counts differ: {} vs {}", x.rows, y.rows)));
    }
    cka_f64(&xs, x.cols, &ys, y.cols, x.rows, center)
}

/// 64-bit form of [`cka`] on raw row-major buffers.
pub fn cka_f64(x: &[f64], dx: usize, y: &[f64], dy: usize, n: usize, center: bool) -> Result<f64> {
    if n < 2 || x.len() != n * dx || y.len() != n * dy {
        return Err(FrzError::Contract("cka inputs must share n ≥ 2 rows".into()));
    }
    let (x, y) = if center { (center_columns(x, n, dx), center_columns(y, n, dy)) } else { (x.to_vec(), y.to_vec()) };
    let (num, den_x, den_y) = if dx.max(dy) <= n {
        let xx = cross(&x, dx, &x, dx, n);
        let yy = cross(&y, dy, &y, dy, n);
        let yx = cross(&y, dy, &x, dx, n);
        (sq_sum(&yx), sq_sum(&xx).sqrt(), sq_sum(&yy).sqrt())
    } else {
        // ‖YᵀX‖²_F = ⟨XXᵀ, YYᵀ⟩ and ‖XᵀX‖_F = ‖XXᵀ‖_F.
        let k = gram(&x, dx, n);
        let l = gram(&y, dy, n);
        let num = k.iter().zip(&l).map(|(a, b)| a * b).sum::<f64>();
        (num, sq_sum(&k).sqrt(), sq_sum(&l).sqrt())
    };
    let den = den_x * den_y;
    if !(den > 0.0) || !den.is_finite() {
        return Err(FrzError::Degenerate("cka denominator is zero (constant activations)".into()));
    }
    Ok(num / den)
}

fn center_columns(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in a.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = a.to_vec();
    for row in out.chunks_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    out
}

/// `aᵀ b` for `a: n×da`, `b: n×db`.
fn cross(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; da * db];
    for r in 0..n {
        let ar = &a[r * da..(r + 1) * da];
        let br = &b[r * db..(r + 1) * db];
        for (i, &av) in ar.iter().enumerate() {
            let o = &mut out[i * db..(i + 1) * db];
            o.iter_mut().zip(br).for_each(|(x, &bv)| *x += av * bv);
        }
    }
    out
}

/// `a aᵀ` for `a: n×d`.
fn gram(a: &[f64], d: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..=i {
            let aj = &a[j * d..(j + 1) * d];
            let v: f64 = ai.iter().zip(aj).map(|(p, q)| p * q).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

fn sq_sum(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// When a CKA trace counts as settled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizationConfig {
    /// Consecutive checkpoints inspected.
    pub window: usize,
    /// Largest allowed max−min spread inside the window.
    pub eps: f64,
    /// The last score must reach at least this value.
    pub min_score: f64,
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        StabilizationConfig { window: 5, eps: 0.01, min_score: 0.6 }
    }
}

impl StabilizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(FrzError::Config(format!("stabilization window must be ≥ 2, got {}", self.window)));
        }
        if !(self.eps > 0.0) {
            return Err(FrzError::Config(format!("stabilization eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(FrzError::Config(format!("min_score must lie in [0, 1], got {}", self.min_score)));
        }
        Ok(())
    }
}

/// True iff the last `window` scores exist, span at most `eps`, and the
/// final score is at least `min_score`.
pub fn stabilized(scores: &[f64], cfg: &StabilizationConfig) -> bool {
    if scores.len() < cfg.window || cfg.window == 0 {
        return false;
    }
    let tail = &scores[scores.len() - cfg.window..];
    let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min <= cfg.eps && *tail.last().unwrap() >= cfg.min_score
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaPoint {
    pub checkpoint: usize,
    pub epoch: u64,
    pub score: f64,
}

/// Per-unit CKA scores in checkpoint order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CkaTrace {
    pub units: BTreeMap<usize, Vec<CkaPoint>>,
}

pub const CKA_CSV_HEADER: &str = "layer_id,checkpoint_index,epoch,score";

impl CkaTrace {
    pub fn push(&mut self, unit: usize, point: CkaPoint) {
        self.units.entry(unit).or_default().push(point);
    }

    pub fn scores(&self, unit: usize) -> Vec<f64> {
        self.units.get(&unit).map(|pts| pts.iter().map(|p| p.score).collect()).unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.units.values().all(Vec::is_empty)
    }

    /// Rows ordered by checkpoint, then unit.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(usize, usize, &CkaPoint)> =
            self.units.iter().flat_map(|(&u, pts)| pts.iter().map(move |p| (p.checkpoint, u, p))).collect();
        rows.sort_by_key(|&(c, u, _)| (c, u));
        let mut out = String::from(CKA_CSV_HEADER);
        out.push('\n');
        for (c, u, p) in rows {
            let _ = writeln!(out, "{u},{c},{},{}", p.epoch, p.score);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CKA_CSV_HEADER) {
            return Err(FrzError::Format("CKA trace CSV header mismatch".into()));
        }
        let mut trace = CkaTrace::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || FrzError::Format(format!("CKA trace CSV line {}: {line:?}", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let unit = f[0].parse().map_err(|_| bad())?;
            let checkpoint = f[1].parse().map_err(|_| bad())?;
            let epoch = f[2].parse().map_err(|_| bad())?;
            let score = f[3].parse().map_err(|_| bad())?;
            trace.push(unit, CkaPoint { checkpoint, epoch, score });
        }
        Ok(trace)
    }
}

/// Label 1 from the first checkpoint at which a unit's trace prefix is
/// stabilised onwards, 0 before.
pub fn label_history(trace: &CkaTrace, cfg: &StabilizationConfig) -> BTreeMap<(usize, usize), u8> {
    let mut labels = BTreeMap::new();
    for (&unit, points) in &trace.units {
        let mut on = false;
        let mut scores = Vec::with_capacity(points.len());
        for p in points {
            scores.push(p.score);
            on = on || stabilized(&scores, cfg);
            labels.insert((unit, p.checkpoint), on as u8);
        }
    }
    labels
}
