//! Browser bindings for the demo page. Every export returns a JSON string.

use domadapt::adapt::argmax_rows;
use domadapt::data::{synth_domain_pair, DomainDataset, SyntheticShiftConfig};
use domadapt::features::{mel_filterbank, MelScale};
use domadapt::nn::Model;
use domadapt::report::{synth_trial, Mode, ModelIdentity, RunConfig};
use domadapt::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Points {
    x: Vec<f32>,
    y: Vec<f32>,
    label: Vec<usize>,
}

impl Points {
    fn of(ds: &DomainDataset) -> Self {
        let labels = ds.evaluation_labels().unwrap_or_default();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for ex in ds.examples() {
            x.push(ex.features.data()[0]);
            y.push(ex.features.data()[1]);
        }
        Points {
            x,
            y,
            label: labels,
        }
    }
}

#[derive(Serialize)]
struct Scatter {
    source: Points,
    target: Points,
}

fn shift(seed: u64, rotation_deg: f64, translation: f64, noise: f64) -> SyntheticShiftConfig {
    SyntheticShiftConfig {
        seed,
        rotation_deg,
        translation: [translation, -translation / 2.0],
        noise,
        per_class: 200,
        ..SyntheticShiftConfig::default()
    }
}

fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("demo values serialize")
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Source and shifted target points of a synthetic pair.
#[wasm_bindgen]
pub fn synthetic_scatter(
    seed: u32,
    rotation_deg: f64,
    translation: f64,
    noise: f64,
) -> Result<String, JsError> {
    let pair =
        synth_domain_pair(&shift(seed as u64, rotation_deg, translation, noise)).map_err(js_err)?;
    Ok(to_json(&Scatter {
        source: Points::of(&pair.source),
        target: Points::of(&pair.target),
    }))
}

#[derive(Serialize)]
struct Grid {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    size: usize,
    /// Row-major predicted class, row 0 at `y_min`.
    non_adapted: Vec<usize>,
    adapted: Vec<usize>,
}

#[derive(Serialize)]
struct Adaptation {
    accuracy: std::collections::BTreeMap<&'static str, f64>,
    held_out_discriminator_accuracy: f64,
    mapper_loss: Vec<f64>,
    discriminator_loss: Vec<Option<f64>>,
    scatter: Scatter,
    grid: Grid,
}

fn classify_grid(
    mapper: &Model<f64>,
    classifier: &Model<f64>,
    pts: &[f64],
) -> Result<Vec<usize>, JsError> {
    let x = Tensor::new(vec![pts.len() / 2, 2], pts.to_vec()).map_err(js_err)?;
    let probs = classifier
        .infer(&mapper.infer(&x).map_err(js_err)?)
        .map_err(js_err)?;
    Ok(argmax_rows(&probs))
}

/// Pretrains on the source, adapts to the target and reports both models.
#[wasm_bindgen]
pub fn run_adaptation(
    seed: u32,
    rotation_deg: f64,
    translation: f64,
    noise: f64,
    adapt_epochs: u32,
) -> Result<String, JsError> {
    let mut cfg = RunConfig::defaults(Mode::Synth, seed as u64);
    let synthetic_seed = cfg.synthetic.seed;
    cfg.synthetic = SyntheticShiftConfig {
        seed: synthetic_seed,
        ..shift(0, rotation_deg, translation, noise)
    };
    cfg.adapt.epochs = adapt_epochs as usize;
    cfg.validate().map_err(js_err)?;
    let trial = synth_trial::<f64>(&cfg).map_err(js_err)?;
    let (train, _) = domadapt::report::synth_pairs(&cfg).map_err(js_err)?;
    let scatter = Scatter {
        source: Points::of(&train.source),
        target: Points::of(&train.target),
    };

    let all = scatter
        .source
        .x
        .iter()
        .chain(&scatter.target.x)
        .map(|&v| v as f64);
    let (x_min, x_max) = all.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let all = scatter
        .source
        .y
        .iter()
        .chain(&scatter.target.y)
        .map(|&v| v as f64);
    let (y_min, y_max) = all.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let size = 64;
    let mut pts = Vec::with_capacity(size * size * 2);
    for r in 0..size {
        for c in 0..size {
            pts.push(x_min + (x_max - x_min) * (c as f64 + 0.5) / size as f64);
            pts.push(y_min + (y_max - y_min) * (r as f64 + 0.5) / size as f64);
        }
    }
    let grid = Grid {
        x_min,
        x_max,
        y_min,
        y_max,
        size,
        non_adapted: classify_grid(&trial.pretrained.mapper, &trial.pretrained.classifier, &pts)?,
        adapted: classify_grid(&trial.adapted.target, &trial.adapted.classifier, &pts)?,
    };
    let table = &trial.comparison.table;
    let mut accuracy = std::collections::BTreeMap::new();
    for (key, model, domain) in [
        ("non_adapted_source", ModelIdentity::NonAdapted, "source"),
        ("non_adapted_target", ModelIdentity::NonAdapted, "target"),
        ("adapted_source", ModelIdentity::Adapted, "source"),
        ("adapted_target", ModelIdentity::Adapted, "target"),
    ] {
        accuracy.insert(key, table.get(model, domain).unwrap_or(0.0));
    }
    Ok(to_json(&Adaptation {
        accuracy,
        held_out_discriminator_accuracy: trial.held_out_discriminator_accuracy,
        mapper_loss: trial.adapted.epochs.iter().map(|e| e.mapper_loss).collect(),
        discriminator_loss: trial
            .adapted
            .epochs
            .iter()
            .map(|e| e.discriminator_loss)
            .collect(),
        scatter,
        grid,
    }))
}

#[derive(Serialize)]
struct Filterbank {
    bin_hz: Vec<f64>,
    centers_hz: Vec<f64>,
    /// One row of weights per band.
    weights: Vec<Vec<f64>>,
}

/// Triangular mel filters over the FFT bins.
#[wasm_bindgen]
pub fn mel_filters(
    n_mels: u32,
    sample_rate: u32,
    n_fft: u32,
    htk: bool,
) -> Result<String, JsError> {
    let scale = if htk { MelScale::Htk } else { MelScale::Slaney };
    let nyquist = sample_rate as f64 / 2.0;
    let bank = mel_filterbank(
        n_mels as usize,
        sample_rate,
        n_fft as usize,
        0.0,
        nyquist,
        scale,
    )
    .map_err(js_err)?;
    let w = &bank.weights;
    Ok(to_json(&Filterbank {
        bin_hz: (0..w.cols)
            .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
            .collect(),
        centers_hz: bank.centers_hz().to_vec(),
        weights: (0..w.rows).map(|r| w.row(r).to_vec()).collect(),
    }))
}
