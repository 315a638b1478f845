//! Small classification tasks: Gaussian blobs, two spirals, and 8×8 digit
//! images read from IDX files.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};
use crate::nn::{Batch, Shape};

pub const PROBE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the class centres.
    pub separation: f64,
    /// Standard deviation of samples around their centre.
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig { classes: 4, dim: 16, train: 2048, test: 512, separation: 1.0, spread: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiralsConfig {
    pub train: usize,
    pub test: usize,
    pub turns: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SpiralsConfig {
    fn default() -> Self {
        SpiralsConfig { train: 2048, test: 512, turns: 1.5, noise: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Digits8Config {
    /// Directory holding `{train,test}-{images.idx3,labels.idx1}-ubyte`.
    pub dir: PathBuf,
}

impl Default for Digits8Config {
    fn default() -> Self {
        Digits8Config { dir: PathBuf::from("data/digits8") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum TaskConfig {
    Blobs(BlobsConfig),
    Spirals(SpiralsConfig),
    Digits8(Digits8Config),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Blobs(_) => "blobs",
            TaskConfig::Spirals(_) => "spirals",
            TaskConfig::Digits8(_) => "digits8",
        }
    }

    /// Same task with its sampling seed shifted by `k`. The digits split is
    /// fixed on disk and is returned unchanged.
    pub fn with_seed_offset(&self, k: u64) -> TaskConfig {
        let mut t = self.clone();
        match &mut t {
            TaskConfig::Blobs(c) => c.seed += k,
            TaskConfig::Spirals(c) => c.seed += k,
            TaskConfig::Digits8(_) => {}
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub input: Shape,
    pub classes: usize,
    pub train: Batch,
    pub test: Batch,
    /// Fixed subset of the training inputs used for representation probes.
    pub probe: Vec<f32>,
    pub probe_len: usize,
}

impl TaskData {
    pub fn sample_len(&self) -> usize {
        self.input.numel()
    }
}

/// Materialises a task. `probe_seed` picks the probe subset.
pub fn load_task(cfg: &TaskConfig, probe_seed: u64) -> Result<TaskData> {
    let (input, classes, train, test) = match cfg {
        TaskConfig::Blobs(c) => blobs(c)?,
        TaskConfig::Spirals(c) => spirals(c)?,
        TaskConfig::Digits8(c) => digits8(&c.dir)?,
    };
    let d = input.numel();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(probe_seed));
    idx.truncate(PROBE_SIZE.min(idx.len()));
    let probe: Vec<f32> = idx.iter().flat_map(|&i| train.inputs[i * d..(i + 1) * d].iter().copied()).collect();
    Ok(TaskData { name: cfg.name().into(), input, classes, train, test, probe_len: idx.len(), probe })
}

type Split = (Shape, usize, Batch, Batch);

fn blobs(c: &BlobsConfig) -> Result<Split> {
    if c.classes < 2 || c.dim == 0 || c.train == 0 || c.test == 0 {
        return Err(FrzError::Config("blobs needs ≥ 2 classes and non-empty dim/splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let centre = Normal::new(0.0, c.separation).map_err(|e| FrzError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, c.spread).map_err(|e| FrzError::Config(e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..c.classes).map(|_| (0..c.dim).map(|_| centre.sample(&mut rng)).collect()).collect();
    let mut draw = |n: usize| {
        let mut inputs = Vec::with_capacity(n * c.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % c.classes;
            inputs.extend(centres[y].iter().map(|&m| (m + noise.sample(&mut rng)) as f32));
            labels.push(y);
        }
        Batch::new(inputs, labels)
    };
    let train = draw(c.train);
    let test = draw(c.test);
    Ok((Shape::Flat(c.dim), c.classes, train, test))
}

fn spirals(c: &SpiralsConfig) -> Result<Split> {
    if c.train == 0 || c.test == 0 {
        return Err(FrzError::Config("spirals needs non-empty splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let noise = Normal::new(0.0, c.noise.max(0.0)).map_err(|e| FrzError::Config(e.to_string()))?;
    let mut draw = |n: usize| {
        let mut inputs = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let r: f64 = rng.random_range(0.05..1.0);
            let a = r * c.turns * std::f64::consts::TAU + y as f64 * std::f64::consts::PI;
            inputs.push((r * a.cos() + noise.sample(&mut rng)) as f32);
            inputs.push((r * a.sin() + noise.sample(&mut rng)) as f32);
            labels.push(y);
        }
        Batch::new(inputs, labels)
    };
    let train = draw(c.train);
    let test = draw(c.test);
    Ok((Shape::Flat(2), 2, train, test))
}

fn digits8(dir: &Path) -> Result<Split> {
    let load = |split: &str| -> Result<Batch> {
        let images = load_idx(&dir.join(format!("{split}-images.idx3-ubyte")))?;
        let labels = load_idx_labels(&dir.join(format!("{split}-labels.idx1-ubyte")))?;
        if images.count != labels.len() {
            return Err(FrzError::Format(format!("{split}: {} images but {} labels", images.count, labels.len())));
        }
        if (images.rows, images.cols) != (8, 8) {
            return Err(FrzError::Format(format!("{split}: images are {}×{}, expected 8×8", images.rows, images.cols)));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(FrzError::Format(format!("{split}: label {l} outside 0..=9")));
        }
        Ok(Batch::new(images.data, labels.into_iter().map(usize::from).collect()))
    };
    Ok((Shape::Image { channels: 1, height: 8, width: 8 }, 10, load("train")?, load("test")?))
}

/// Greyscale images from an IDX file, scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count × 1 × rows × cols`, row-major.
    pub data: Vec<f32>,
}

impl IdxImages {
    pub fn shape(&self) -> [usize; 4] {
        [self.count, 1, self.rows, self.cols]
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_payload(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let ndims = (magic & 0xff) as usize;
    let word = |i: usize| -> Option<u32> { bytes.get(4 * i..4 * i + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())) };
    let found = word(0).ok_or_else(|| FrzError::Format(format!("{}: file too short for an IDX header", path.display())))?;
    if found != magic {
        return Err(FrzError::Format(format!("{}: IDX magic {found:#010x}, expected {magic:#010x}", path.display())));
    }
    let dims = (1..=ndims)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| FrzError::Format(format!("{}: truncated IDX header", path.display())))?;
    let start = 4 * (ndims + 1);
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(FrzError::Format(format!(
            "{}: IDX payload has {} bytes, header declares {expected}",
            path.display(),
            payload.len()
        )));
    }
    Ok((dims, payload.to_vec()))
}

pub fn load_idx(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path)?;
    let (dims, payload) = idx_payload(&bytes, IDX_IMAGES, path)?;
    Ok(IdxImages { count: dims[0], rows: dims[1], cols: dims[2], data: payload.iter().map(|&p| p as f32 / 255.0).collect() })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    Ok(idx_payload(&bytes, IDX_LABELS, path)?.1)
}

/// Writes an unsigned-byte IDX image file.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    let mut out = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = IDX_LABELS.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}
