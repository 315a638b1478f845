use serde::{Deserialize, Serialize};

use crate::error::{FrzError, Result};

/// Activation shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }

    /// Channel count and per-channel spatial size.
    pub fn channels(&self) -> (usize, usize) {
        match *self {
            Shape::Flat(n) => (n, 1),
            Shape::Image { channels, height, width } => (channels, height * width),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Flat(n) => write!(f, "{n}"),
            Shape::Image { channels, height, width } => write!(f, "{channels}×{height}×{width}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Per-channel affine scale and shift.
    Norm { channels: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn has_params(&self) -> bool {
        self.is_parametric() || matches!(self, LayerSpec::Norm { .. })
    }

    /// Output shape for `input`, or a description of why it does not fit.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        match (*self, input) {
            (LayerSpec::Dense { in_features, out_features }, Shape::Flat(n)) => {
                if n == in_features {
                    Ok(Shape::Flat(out_features))
                } else {
                    Err(format!("dense expects {in_features} features, got {n}"))
                }
            }
            (LayerSpec::Dense { .. }, s) => Err(format!("dense expects flat input, got {s}")),
            (
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding },
                Shape::Image { channels, height, width },
            ) => {
                if channels != in_channels {
                    return Err(format!("conv expects {in_channels} channels, got {channels}"));
                }
                if kernel == 0 || stride == 0 {
                    return Err("conv kernel and stride must be positive".into());
                }
                if height + 2 * padding < kernel || width + 2 * padding < kernel {
                    return Err(format!("kernel {kernel} larger than padded input {height}×{width}"));
                }
                Ok(Shape::Image {
                    channels: out_channels,
                    height: (height + 2 * padding - kernel) / stride + 1,
                    width: (width + 2 * padding - kernel) / stride + 1,
                })
            }
            (LayerSpec::Conv2d { .. }, s) => Err(format!("conv expects image input, got {s}")),
            (LayerSpec::Norm { channels }, s) => {
                if s.channels().0 == channels {
                    Ok(s)
                } else {
                    Err(format!("norm expects {channels} channels, got {}", s.channels().0))
                }
            }
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Flatten, s) => Ok(Shape::Flat(s.numel())),
        }
    }

    /// Shapes accepted by a layer regardless of its predecessor, used to
    /// phrase mismatch errors.
    fn describe(&self) -> String {
        match self {
            LayerSpec::Dense { in_features, out_features } => format!("Dense({in_features},{out_features})"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                format!("Conv2d({in_channels},{out_channels},{kernel},{stride},{padding})")
            }
            LayerSpec::Norm { channels } => format!("Norm({channels})"),
            LayerSpec::Relu => "ReLU".into(),
            LayerSpec::Flatten => "Flatten".into(),
        }
    }
}

/// A sequential chain of layers applied to samples of shape `input`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input, layers }
    }

    /// Convenience constructor for an MLP `dims[0] → … → dims[n]` with ReLU
    /// between dense layers.
    pub fn mlp(dims: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense { in_features: w[0], out_features: w[1] });
        }
        NetworkSpec::new(Shape::Flat(dims[0]), layers)
    }

    /// Activation shapes: entry `i` is the input of layer `i`, the last entry
    /// is the network output.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(FrzError::Spec("network has no layers".into()));
        }
        let mut shapes = vec![self.input];
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Norm { .. } = layer {
                let ok = i > 0 && self.layers[i - 1].is_parametric();
                if !ok {
                    return Err(FrzError::Spec(format!(
                        "norm layer {i} must immediately follow a dense or conv layer"
                    )));
                }
            }
            let prev = *shapes.last().unwrap();
            match layer.output_shape(prev) {
                Ok(s) => shapes.push(s),
                Err(why) => {
                    let at = if i == 0 { "input→layer 0".to_string() } else { format!("layers {}→{}", i - 1, i) };
                    return Err(FrzError::Spec(format!(
                        "shape mismatch at {at}: {} ({why})",
                        layer.describe()
                    )));
                }
            }
        }
        match shapes.last().unwrap() {
            Shape::Flat(_) => Ok(shapes),
            s => Err(FrzError::Spec(format!("network output must be flat, got {s}"))),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().unwrap().numel())
    }

    pub fn parametric_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_parametric()).collect()
    }

    /// One unit per parametric layer, grouping a directly following norm.
    pub fn default_units(&self) -> Vec<FreezeUnit> {
        self.parametric_layers()
            .into_iter()
            .enumerate()
            .map(|(unit_id, li)| {
                let mut layer_indices = vec![li];
                if matches!(self.layers.get(li + 1), Some(LayerSpec::Norm { .. })) {
                    layer_indices.push(li + 1);
                }
                FreezeUnit { unit_id, layer_indices }
            })
            .collect()
    }

    /// Checks that `units` partition the parametric layers in order, each
    /// unit holding one parametric layer plus its trailing norm.
    pub fn validate_units(&self, units: &[FreezeUnit]) -> Result<()> {
        let expected = self.default_units();
        if units.len() != expected.len() {
            return Err(FrzError::Spec(format!(
                "expected {} freeze units (one per parametric layer), got {}",
                expected.len(),
                units.len()
            )));
        }
        for (u, e) in units.iter().zip(&expected) {
            if u != e {
                return Err(FrzError::Spec(format!(
                    "freeze unit {} covers layers {:?}, expected {:?}",
                    u.unit_id, u.layer_indices, e.layer_indices
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeUnit {
    pub unit_id: usize,
    pub layer_indices: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_mismatch_names_layer_pair() {
        let spec = NetworkSpec::new(
            Shape::Flat(4),
            vec![
                LayerSpec::Dense { in_features: 4, out_features: 2 },
                LayerSpec::Dense { in_features: 3, out_features: 1 },
            ],
        );
        let err = spec.shapes().unwrap_err().to_string();
        assert!(err.contains("shape mismatch at layers 0→1"), "{err}");
    }

    #[test]
    fn conv_then_flatten_gives_256_features() {
        let spec = NetworkSpec::new(
            Shape::Image { channels: 1, height: 8, width: 8 },
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Flatten,
            ],
        );
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], Shape::Image { channels: 4, height: 8, width: 8 });
        assert_eq!(shapes[2], Shape::Flat(256));
    }

    #[test]
    fn norm_must_follow_parametric_layer() {
        let spec = NetworkSpec::new(
            Shape::Flat(3),
            vec![LayerSpec::Relu, LayerSpec::Norm { channels: 3 }],
        );
        assert!(matches!(spec.shapes(), Err(FrzError::Spec(_))));
    }

    #[test]
    fn default_units_group_trailing_norm() {
        let spec = NetworkSpec::new(
            Shape::Flat(3),
            vec![
                LayerSpec::Dense { in_features: 3, out_features: 4 },
                LayerSpec::Norm { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_features: 4, out_features: 2 },
            ],
        );
        let units = spec.default_units();
        assert_eq!(units[0].layer_indices, vec![0, 1]);
        assert_eq!(units[1].layer_indices, vec![3]);
        spec.validate_units(&units).unwrap();
        let bad = vec![FreezeUnit { unit_id: 0, layer_indices: vec![0] }, units[1].clone()];
        assert!(spec.validate_units(&bad).is_err());
    }
}
