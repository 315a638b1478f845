use std::path::Path;

use super::{Mlp, PredictorDims, PredictorParams, Preprocess};
use crate::container::Container;
use crate::error::{FrzError, Result};

pub const PREDICTOR_KIND: &str = "predictor";

const NAMES: [&str; 4] = ["key", "query", "value", "head"];

pub fn to_container(params: &PredictorParams, window: usize) -> Container {
    let mut c = Container::new(PREDICTOR_KIND);
    c.set_field("tailored_size", &params.dims.input);
    c.set_field("window", &window);
    c.set_field("dims", &params.dims);
    c.set_field("preprocess", &params.preprocess);
    for (name, mlp) in NAMES.iter().zip(params.mlps()) {
        for (i, l) in mlp.layers.iter().enumerate() {
            c.push_tensor(&format!("{name}.{i}.weight"), &[l.out, l.inp], &l.weight);
            c.push_tensor(&format!("{name}.{i}.bias"), &[l.out], &l.bias);
        }
    }
    c
}

pub fn from_container(c: &Container) -> Result<(PredictorParams, usize)> {
    c.expect_kind(PREDICTOR_KIND)?;
    let dims: PredictorDims = c.header_field("dims")?;
    let tailored: usize = c.header_field("tailored_size")?;
    let window: usize = c.header_field("window")?;
    let preprocess: Preprocess = c.header_field("preprocess")?;
    if tailored != dims.input {
        return Err(FrzError::DimensionMismatch(format!("tailored_size {tailored} differs from input dim {}", dims.input)));
    }
    let mut params = PredictorParams::init(dims, preprocess, 0);
    for (name, mlp) in NAMES.iter().zip(params.mlps_mut()) {
        let layers = std::mem::take(&mut mlp.layers);
        let mut rebuilt = Mlp { layers: Vec::new() };
        for (i, mut l) in layers.into_iter().enumerate() {
            let (ws, w) = c.tensor(&format!("{name}.{i}.weight"))?;
            let (bs, b) = c.tensor(&format!("{name}.{i}.bias"))?;
            if ws != [l.out, l.inp] || bs != [l.out] {
                return Err(FrzError::DimensionMismatch(format!("{name}.{i} has shape {ws:?}, header dims imply [{}, {}]", l.out, l.inp)));
            }
            l.weight = w;
            l.bias = b;
            rebuilt.layers.push(l);
        }
        *mlp = rebuilt;
    }
    Ok((params, window))
}

pub fn save(params: &PredictorParams, window: usize, path: &Path) -> Result<()> {
    to_container(params, window).write(path)
}

/// Loads a predictor and the window it was trained for.
pub fn load(path: &Path) -> Result<(PredictorParams, usize)> {
    from_container(&Container::read(path)?)
}

/// As [`load`], rejecting files built for another tailored size.
pub fn load_expecting(path: &Path, tailored_size: usize) -> Result<(PredictorParams, usize)> {
    let (p, w) = load(path)?;
    if p.dims.input != tailored_size {
        return Err(FrzError::DimensionMismatch(format!(
            "predictor expects tailored size {}, run uses {tailored_size}",
            p.dims.input
        )));
    }
    Ok((p, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_and_rejections() {
        let dims = PredictorDims { input: 16, hidden: 8, embed: 4, head_hidden: 3 };
        let p = PredictorParams::init(dims, Preprocess::Standardize, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.frzp");
        save(&p, 30, &path).unwrap();
        let (back, w) = load(&path).unwrap();
        assert_eq!((back, w), (p.clone(), 30));
        assert!(matches!(load_expecting(&path, 1024), Err(FrzError::DimensionMismatch(_))));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&path), Err(FrzError::Format(_))));
    }
}
