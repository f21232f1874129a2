//! Layers, sequential model specs and the built-in architectures.

mod model;
pub mod presets;
mod spec;

pub use model::{Mode, Model, Pass, BN_EPS, BN_MOMENTUM};
pub use presets::{preset, Architecture, KaggleGeometry, PresetOptions};
pub use spec::{LayerSpec, ModelSpec};

use crate::autodiff::AutodiffError;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("model `{model}` layer {index} ({kind}): {reason}")]
    Construction {
        model: String,
        index: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown parameter or buffer `{0}`")]
    UnknownTensor(String),
    #[error("contract violation: {what} expected shape {expected:?}, got {actual:?}")]
    Input {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Instantiates `spec` with parameters drawn deterministically from `seed`.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, NnError> {
    Model::build(spec, &spec.name, seed)
}

/// Overflow-safe softmax over the last axis.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    crate::autodiff::softmax_values(logits)
}
