//! Built-in architectures, addressable by name.
//!
//! Mapper presets consume `(1, mel bands, frames)` spectrogram patches.
//! Classifier and discriminator presets take the mapper's output shape as
//! their input shape.

use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, ModelSpec};
use super::NnError;

pub const MAPPERS: &[&str] = &["kaggle_m", "dcase_m", "mlp"];
pub const CLASSIFIERS: &[&str] = &["clf_kaggle", "clf_dcase", "clf_mlp"];
pub const DISCRIMINATORS: &[&str] = &["disc_kaggle", "disc_dcase", "disc_mlp"];

/// Pooling and padding of the 5-layer convolutional mapper, which are
/// configurable because only kernels, filters and strides are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KaggleGeometry {
    pub pool_kernel: (usize, usize),
    pub pool_stride: (usize, usize),
    /// Pad every convolution by `floor(kernel / 2)` per axis.
    pub half_padding: bool,
}

impl Default for KaggleGeometry {
    fn default() -> Self {
        KaggleGeometry {
            pool_kernel: (2, 2),
            pool_stride: (2, 2),
            half_padding: true,
        }
    }
}

/// Everything a preset needs besides its name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetOptions {
    pub n_classes: usize,
    /// Hidden widths of the classifier; `None` uses the preset's default.
    pub classifier_hidden: Option<Vec<usize>>,
    /// Hidden widths of the MLP mapper (every layer ReLU-activated).
    pub mlp_widths: Vec<usize>,
    /// Hidden widths of the MLP discriminator.
    pub disc_mlp_widths: Vec<usize>,
    pub kaggle: KaggleGeometry,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            n_classes: 10,
            classifier_hidden: None,
            mlp_widths: vec![32, 32],
            disc_mlp_widths: vec![32, 32],
            kaggle: KaggleGeometry::default(),
        }
    }
}

fn half(k: (usize, usize), on: bool) -> (usize, usize) {
    if on {
        (k.0 / 2, k.1 / 2)
    } else {
        (0, 0)
    }
}

/// Five convolutions: kernels 11, 5, 3, 3, 3; filters 48, 128, 192, 192, 128;
/// stride (2, 3) on the first two. ReLU follows every convolution; max-pool
/// and batch-norm follow the 1st, 2nd and 5th.
pub fn kaggle_m(input_shape: Vec<usize>, geom: KaggleGeometry) -> ModelSpec {
    let pool = LayerSpec::MaxPool2d {
        kernel: geom.pool_kernel,
        stride: geom.pool_stride,
    };
    let conv = |filters, k: (usize, usize), stride| {
        LayerSpec::conv(filters, k, stride, half(k, geom.half_padding))
    };
    let layers = vec![
        conv(48, (11, 11), (2, 3)),
        LayerSpec::Relu,
        pool.clone(),
        LayerSpec::BatchNorm,
        conv(128, (5, 5), (2, 3)),
        LayerSpec::Relu,
        pool.clone(),
        LayerSpec::BatchNorm,
        conv(192, (3, 3), (1, 1)),
        LayerSpec::Relu,
        conv(192, (3, 3), (1, 1)),
        LayerSpec::Relu,
        conv(128, (3, 3), (1, 1)),
        LayerSpec::Relu,
        pool,
        LayerSpec::BatchNorm,
    ];
    ModelSpec::new("kaggle_m", input_shape, layers)
}

/// Two 7×7 convolutions (32 and 64 filters), each followed by batch-norm,
/// ReLU and max-pool; pools (8, 4) and (4, 100); second conv padded (3, 0).
pub fn dcase_m(input_shape: Vec<usize>) -> ModelSpec {
    let layers = vec![
        LayerSpec::conv(32, (7, 7), (1, 1), (3, 3)),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::pool((8, 4)),
        LayerSpec::conv(64, (7, 7), (1, 1), (3, 0)),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::pool((4, 100)),
    ];
    ModelSpec::new("dcase_m", input_shape, layers)
}

/// Fully connected ReLU stack over flat inputs.
pub fn mlp(input_width: usize, widths: &[usize]) -> ModelSpec {
    let mut layers = Vec::new();
    for &w in widths {
        layers.push(LayerSpec::linear(w));
        layers.push(LayerSpec::Relu);
    }
    ModelSpec::new("mlp", vec![input_width], layers)
}

/// Three 3×3 convolutions (64, 32, 16 filters, padding 1), each followed by
/// ReLU and batch-norm, then a single sigmoid unit.
pub fn disc_kaggle(input_shape: Vec<usize>) -> ModelSpec {
    let mut layers = Vec::new();
    for filters in [64, 32, 16] {
        layers.push(LayerSpec::conv(filters, (3, 3), (1, 1), (1, 1)));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::BatchNorm);
    }
    layers.extend([LayerSpec::Flatten, LayerSpec::linear(1), LayerSpec::Sigmoid]);
    ModelSpec::new("disc_kaggle", input_shape, layers)
}

/// One linear layer on the flattened features, then a sigmoid.
pub fn disc_dcase(input_shape: Vec<usize>) -> ModelSpec {
    ModelSpec::new(
        "disc_dcase",
        input_shape,
        vec![LayerSpec::Flatten, LayerSpec::linear(1), LayerSpec::Sigmoid],
    )
}

pub fn disc_mlp(input_shape: Vec<usize>, widths: &[usize]) -> ModelSpec {
    let mut layers = vec![LayerSpec::Flatten];
    for &w in widths {
        layers.push(LayerSpec::linear(w));
        layers.push(LayerSpec::Relu);
    }
    layers.extend([LayerSpec::linear(1), LayerSpec::Sigmoid]);
    ModelSpec::new("disc_mlp", input_shape, layers)
}

/// Flatten, hidden linear+ReLU+dropout blocks, output linear, softmax.
pub fn classifier(
    name: &str,
    input_shape: Vec<usize>,
    hidden: &[usize],
    dropout: f64,
    n_classes: usize,
) -> ModelSpec {
    let mut layers = vec![LayerSpec::Flatten];
    for &w in hidden {
        layers.push(LayerSpec::linear(w));
        layers.push(LayerSpec::Relu);
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { p: dropout });
        }
    }
    layers.extend([LayerSpec::linear(n_classes), LayerSpec::Softmax]);
    ModelSpec::new(name, input_shape, layers)
}

/// Three linear layers, 25% dropout.
pub fn clf_kaggle(
    input_shape: Vec<usize>,
    n_classes: usize,
    hidden: Option<&[usize]>,
) -> ModelSpec {
    classifier(
        "clf_kaggle",
        input_shape,
        hidden.unwrap_or(&[256, 128]),
        0.25,
        n_classes,
    )
}

/// Two linear layers, 30% dropout.
pub fn clf_dcase(input_shape: Vec<usize>, n_classes: usize, hidden: Option<&[usize]>) -> ModelSpec {
    classifier(
        "clf_dcase",
        input_shape,
        hidden.unwrap_or(&[128]),
        0.3,
        n_classes,
    )
}

/// Linear softmax head (optionally with hidden layers), no dropout.
pub fn clf_mlp(input_shape: Vec<usize>, n_classes: usize, hidden: Option<&[usize]>) -> ModelSpec {
    classifier(
        "clf_mlp",
        input_shape,
        hidden.unwrap_or(&[]),
        0.0,
        n_classes,
    )
}

/// Resolves a preset name. `input_shape` is the raw example shape for
/// mappers and the mapper output shape for classifiers/discriminators.
pub fn preset(
    name: &str,
    input_shape: Vec<usize>,
    opts: &PresetOptions,
) -> Result<ModelSpec, NnError> {
    let hidden = opts.classifier_hidden.as_deref();
    let spec = match name {
        "kaggle_m" => kaggle_m(input_shape, opts.kaggle),
        "dcase_m" => dcase_m(input_shape),
        "mlp" => {
            let width = input_shape.iter().product();
            mlp(width, &opts.mlp_widths)
        }
        "disc_kaggle" => disc_kaggle(input_shape),
        "disc_dcase" => disc_dcase(input_shape),
        "disc_mlp" => disc_mlp(input_shape, &opts.disc_mlp_widths),
        "clf_kaggle" => clf_kaggle(input_shape, opts.n_classes, hidden),
        "clf_dcase" => clf_dcase(input_shape, opts.n_classes, hidden),
        "clf_mlp" => clf_mlp(input_shape, opts.n_classes, hidden),
        other => return Err(NnError::UnknownPreset(other.to_string())),
    };
    spec.propagate()?;
    Ok(spec)
}

/// Mapper, classifier and discriminator specs wired to each other's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub mapper: ModelSpec,
    pub classifier: ModelSpec,
    pub discriminator: ModelSpec,
}

impl Architecture {
    pub fn resolve(
        mapper: &str,
        classifier: &str,
        discriminator: &str,
        example_shape: Vec<usize>,
        opts: &PresetOptions,
    ) -> Result<Self, NnError> {
        let mapper = preset(mapper, example_shape, opts)?;
        let features = mapper.output_shape()?;
        Ok(Architecture {
            classifier: preset(classifier, features.clone(), opts)?,
            discriminator: preset(discriminator, features, opts)?,
            mapper,
        })
    }
}
