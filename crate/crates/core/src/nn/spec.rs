//! Declarative layer stacks and shape propagation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NnError;
use crate::autodiff::window_output;

/// One layer of a sequential model. Pairs are `(rows, cols)`, i.e.
/// `(mel bands, frames)` for spectrogram inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        #[serde(default = "unit_pair")]
        stride: (usize, usize),
        #[serde(default)]
        padding: (usize, usize),
    },
    MaxPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    /// Normalizes axis 1 of `(N, C, ...)` activations.
    BatchNorm,
    Linear {
        /// Expected input width; checked during shape propagation when given.
        #[serde(default)]
        inputs: Option<usize>,
        outputs: usize,
    },
    Relu,
    Dropout {
        p: f64,
    },
    Flatten,
    Softmax,
    Sigmoid,
}

fn unit_pair() -> (usize, usize) {
    (1, 1)
}

impl LayerSpec {
    pub fn conv(
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        }
    }

    pub fn pool(kernel: (usize, usize)) -> Self {
        LayerSpec::MaxPool2d {
            kernel,
            stride: kernel,
        }
    }

    pub fn linear(outputs: usize) -> Self {
        LayerSpec::Linear {
            inputs: None,
            outputs,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                if filters == 0 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0
                {
                    return Err("filters, kernel and stride must be at least 1".into());
                }
                let [_, h, w] = input else {
                    return Err(format!(
                        "expects (channels, rows, cols) input, got {input:?}"
                    ));
                };
                match (
                    window_output(*h, kernel.0, stride.0, padding.0),
                    window_output(*w, kernel.1, stride.1, padding.1),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![filters, oh, ow]),
                    _ => Err(format!(
                        "kernel {kernel:?} with padding {padding:?} does not fit {input:?}"
                    )),
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err("kernel and stride must be at least 1".into());
                }
                let [c, h, w] = input else {
                    return Err(format!(
                        "expects (channels, rows, cols) input, got {input:?}"
                    ));
                };
                match (
                    window_output(*h, kernel.0, stride.0, 0),
                    window_output(*w, kernel.1, stride.1, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                    _ => Err(format!("window {kernel:?} does not fit {input:?}")),
                }
            }
            LayerSpec::BatchNorm => {
                if input.is_empty() {
                    return Err("needs at least a channel axis".into());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Linear { inputs, outputs } => {
                let [width] = input else {
                    return Err(format!("expects a flat input, got {input:?}"));
                };
                if outputs == 0 {
                    return Err("output width must be at least 1".into());
                }
                if let Some(expected) = inputs {
                    if expected != *width {
                        return Err(format!(
                            "expects input width {expected}, previous layer produces {width}"
                        ));
                    }
                }
                Ok(vec![outputs])
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(format!("probability {p} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Softmax | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }
}

/// A named sequential architecture with its per-example input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        ModelSpec {
            name: name.into(),
            input_shape,
            layers,
        }
    }

    /// Shape after every layer, starting with the input shape.
    pub fn propagate(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(NnError::Construction {
                model: self.name.clone(),
                index: 0,
                kind: "input",
                reason: format!("invalid input shape {:?}", self.input_shape),
            });
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (index, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|reason| NnError::Construction {
                    model: self.name.clone(),
                    index,
                    kind: layer.kind(),
                    reason,
                })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        Ok(self.propagate()?.pop().unwrap())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let hash = Sha256::digest(&bytes);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
