//! Run configuration read from TOML.
//!
//! Sections left out of the file fall back to mode-dependent defaults:
//! `synth` uses small, fast settings on the MLP presets, the corpus modes use
//! the full-scale convolutional presets and schedules. Keys given in a
//! section override individual fields of that default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ReportError;
use crate::adapt::{AdaptConfig, PretrainConfig};
use crate::data::{Composition, Device, SyntheticShiftConfig, SCENES};
use crate::features::FeatureConfig;
use crate::nn::presets::{CLASSIFIERS, DISCRIMINATORS, MAPPERS};
use crate::nn::PresetOptions;
use crate::real::Precision;
use crate::seed;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DOMADAPT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Adapt,
    Evaluate,
    Synth,
    Features,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Pretrain,
        Mode::Adapt,
        Mode::Evaluate,
        Mode::Synth,
        Mode::Features,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Adapt => "adapt",
            Mode::Evaluate => "evaluate",
            Mode::Synth => "synth",
            Mode::Features => "features",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

/// Preset names plus the options shared by all presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub mapper: String,
    pub classifier: String,
    pub discriminator: String,
    #[serde(default)]
    pub options: PresetOptions,
}

impl ModelsConfig {
    fn validate(&self) -> Result<(), ReportError> {
        for (name, known) in [
            (&self.mapper, MAPPERS),
            (&self.classifier, CLASSIFIERS),
            (&self.discriminator, DISCRIMINATORS),
        ] {
            if !known.contains(&name.as_str()) {
                return Err(ReportError::Config(format!(
                    "unknown preset `{name}` (expected one of {known:?})"
                )));
            }
        }
        Ok(())
    }
}

/// Corpus locations for the `features`, `pretrain`, `adapt` and `evaluate`
/// modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV with columns `clip_id,path,device,scene`.
    pub manifest: Option<PathBuf>,
    /// Audio paths in the manifest are relative to this directory; defaults
    /// to the manifest's directory.
    pub audio_root: Option<PathBuf>,
    /// Feature store written by `features` and read by the training modes.
    pub features: Option<PathBuf>,
    pub source_device: Device,
    pub target_devices: Vec<Device>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            manifest: None,
            audio_root: None,
            features: None,
            source_device: Device::A,
            target_devices: vec![Device::B, Device::C],
        }
    }
}

/// Checkpoints consumed by `adapt` and `evaluate`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    /// Source mapper and classifier, as written by `pretrain`.
    pub pretrained: Option<PathBuf>,
    /// Target mapper and classifier, as written by `adapt`.
    pub adapted: Option<PathBuf>,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Output directory; excluded from the config digest.
    pub out: PathBuf,
    pub precision: Precision,
    pub models: ModelsConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub synthetic: SyntheticShiftConfig,
    pub dataset: DatasetConfig,
    pub features: FeatureConfig,
    pub checkpoints: CheckpointPaths,
}

/// Fields of the file as written; every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<Mode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    precision: Option<Precision>,
    models: Option<toml::Table>,
    pretrain: Option<toml::Table>,
    adapt: Option<toml::Table>,
    synthetic: Option<toml::Table>,
    dataset: Option<toml::Table>,
    features: Option<toml::Table>,
    checkpoints: Option<toml::Table>,
}

/// Values given on the command line; they take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
}

fn default_out(mode: Mode) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(mode.as_str())
}

/// Overlays `table` on the serialized default and decodes the result, so
/// unknown keys are still rejected. JSON is the intermediate form because
/// derived seeds do not fit TOML integers.
fn overlay<T>(section: &str, default: T, table: Option<toml::Table>) -> Result<T, ReportError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let Some(table) = table else {
        return Ok(default);
    };
    if table.contains_key("seed") {
        return Err(ReportError::Config(format!(
            "[{section}]: `seed` is derived from the top-level seed and cannot be set per section"
        )));
    }
    let err = |e: serde_json::Error| ReportError::Config(format!("[{section}]: {e}"));
    let mut base = serde_json::to_value(&default).map_err(err)?;
    merge(&mut base, serde_json::to_value(table).map_err(err)?);
    serde_json::from_value(base).map_err(err)
}

/// Nested objects merge key by key; any other value replaces the base.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// TOML has no null; unset options are simply left out.
fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(o) => {
            o.retain(|_, x| !x.is_null());
            o.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

impl RunConfig {
    /// Defaults for `mode` with every seed derived from `seed`.
    pub fn defaults(mode: Mode, seed: u64) -> Self {
        let synth = mode == Mode::Synth;
        let models = if synth {
            ModelsConfig {
                mapper: "mlp".into(),
                classifier: "clf_mlp".into(),
                discriminator: "disc_mlp".into(),
                options: PresetOptions {
                    n_classes: 3,
                    ..PresetOptions::default()
                },
            }
        } else {
            ModelsConfig {
                mapper: "kaggle_m".into(),
                classifier: "clf_kaggle".into(),
                discriminator: "disc_kaggle".into(),
                options: PresetOptions::default(),
            }
        };
        let pretrain = if synth {
            PretrainConfig {
                epochs: 30,
                lr: 1e-3,
                ..PretrainConfig::default()
            }
        } else {
            PretrainConfig::default()
        };
        let adapt = if synth {
            // The discriminator steps once per 10 mapper steps; a 10x rate
            // keeps it from lagging the mapper in the small synthetic game.
            AdaptConfig {
                composition: Composition::single(),
                epochs: 20,
                d_lr: Some(1e-3),
                ..AdaptConfig::default()
            }
        } else {
            AdaptConfig::default()
        };
        let mut cfg = RunConfig {
            mode,
            seed,
            out: default_out(mode),
            precision: if synth {
                Precision::F64
            } else {
                Precision::F32
            },
            models,
            pretrain,
            adapt,
            synthetic: SyntheticShiftConfig::default(),
            dataset: DatasetConfig::default(),
            features: FeatureConfig::default(),
            checkpoints: CheckpointPaths::default(),
        };
        cfg.derive_seeds();
        cfg
    }

    fn derive_seeds(&mut self) {
        self.pretrain.seed = seed::derive(self.seed, "pretrain");
        self.adapt.seed = seed::derive(self.seed, "adapt");
        self.synthetic.seed = seed::derive(self.seed, "synthetic");
    }

    /// Parses a TOML document and applies `overrides`. The mode must come
    /// from one of the two.
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, ReportError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ReportError::Config(e.to_string()))?;
        let mode = match (overrides.mode, raw.mode) {
            (Some(cli), Some(file)) if cli != file => {
                return Err(ReportError::Config(format!(
                    "config is for mode `{file}`, invoked as `{cli}`"
                )));
            }
            (Some(m), _) | (None, Some(m)) => m,
            (None, None) => return Err(ReportError::Config("no mode given".into())),
        };
        let seed = overrides.seed.or(raw.seed).unwrap_or(0);
        let d = RunConfig::defaults(mode, seed);
        let mut cfg = RunConfig {
            mode,
            seed,
            out: overrides.out.clone().or(raw.out).unwrap_or(d.out),
            precision: overrides.precision.or(raw.precision).unwrap_or(d.precision),
            models: overlay("models", d.models, raw.models)?,
            pretrain: overlay("pretrain", d.pretrain, raw.pretrain)?,
            adapt: overlay("adapt", d.adapt, raw.adapt)?,
            synthetic: overlay("synthetic", d.synthetic, raw.synthetic)?,
            dataset: overlay("dataset", d.dataset, raw.dataset)?,
            features: overlay("features", d.features, raw.features)?,
            checkpoints: overlay("checkpoints", d.checkpoints, raw.checkpoints)?,
        };
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReportError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    /// Defaults for `overrides.mode` with the other overrides applied.
    pub fn from_overrides(overrides: &Overrides) -> Result<Self, ReportError> {
        Self::from_toml("", overrides)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if i64::try_from(self.seed).is_err() {
            return Err(ReportError::Config(format!(
                "seed {} exceeds {}",
                self.seed,
                i64::MAX
            )));
        }
        self.models.validate()?;
        self.synthetic
            .validate()
            .map_err(|e| ReportError::Config(format!("[synthetic]: {e}")))?;
        if self.features.n_fft == 0 || self.features.hop == 0 || self.features.n_mels == 0 {
            return Err(ReportError::Config(
                "[features]: n_fft, hop and n_mels must be positive".into(),
            ));
        }
        if self.adapt.composition.per_target.len() != self.expected_target_streams() {
            return Err(ReportError::Config(format!(
                "[adapt]: composition draws from {} target streams, the run has {}",
                self.adapt.composition.per_target.len(),
                self.expected_target_streams()
            )));
        }
        let readable = |what: &str, p: &Option<PathBuf>| -> Result<(), ReportError> {
            match p {
                Some(p) if !p.exists() => Err(ReportError::Config(format!(
                    "{what} `{}` does not exist",
                    p.display()
                ))),
                _ => Ok(()),
            }
        };
        match self.mode {
            Mode::Synth if self.models.options.n_classes != self.synthetic.n_classes => {
                Err(ReportError::Config(format!(
                    "models.options.n_classes = {} but the synthetic set has {} classes",
                    self.models.options.n_classes, self.synthetic.n_classes
                )))
            }
            Mode::Synth => Ok(()),
            _ if self.mode != Mode::Features && self.models.options.n_classes != SCENES.len() => {
                Err(ReportError::Config(format!(
                    "models.options.n_classes = {} but the corpus has {} scenes",
                    self.models.options.n_classes,
                    SCENES.len()
                )))
            }
            Mode::Features => {
                self.require("dataset.manifest", &self.dataset.manifest)?;
                readable("dataset.manifest", &self.dataset.manifest)
            }
            Mode::Pretrain | Mode::Adapt | Mode::Evaluate => {
                self.require("dataset.manifest", &self.dataset.manifest)?;
                self.require("dataset.features", &self.dataset.features)?;
                readable("dataset.manifest", &self.dataset.manifest)?;
                readable("dataset.features", &self.dataset.features)?;
                match self.mode {
                    Mode::Adapt => {
                        self.require("checkpoints.pretrained", &self.checkpoints.pretrained)?;
                        readable("checkpoints.pretrained", &self.checkpoints.pretrained)
                    }
                    Mode::Evaluate => {
                        if self.checkpoints.pretrained.is_none()
                            && self.checkpoints.adapted.is_none()
                        {
                            return Err(ReportError::Config(
                                "evaluate needs checkpoints.pretrained, checkpoints.adapted or both".into(),
                            ));
                        }
                        readable("checkpoints.pretrained", &self.checkpoints.pretrained)?;
                        readable("checkpoints.adapted", &self.checkpoints.adapted)
                    }
                    _ => Ok(()),
                }
            }
        }
    }

    fn expected_target_streams(&self) -> usize {
        if self.mode == Mode::Synth {
            1
        } else {
            self.dataset.target_devices.len()
        }
    }

    fn require(&self, key: &str, value: &Option<PathBuf>) -> Result<(), ReportError> {
        match value {
            Some(_) => Ok(()),
            None => Err(ReportError::Config(format!(
                "mode `{}` needs `{key}`",
                self.mode
            ))),
        }
    }

    /// Hex SHA-256 of the resolved configuration without `out`, so the same
    /// experiment written to different directories shares a digest.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
        }
        let hash = Sha256::digest(serde_json::to_vec(&v).expect("config serializes"));
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The resolved configuration as TOML, suitable for re-running.
    pub fn to_toml(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for section in ["pretrain", "adapt", "synthetic"] {
            if let Some(s) = v.get_mut(section).and_then(|s| s.as_object_mut()) {
                s.remove("seed");
            }
        }
        strip_nulls(&mut v);
        let t: toml::Table = serde_json::from_value(v).expect("seed checked by validate");
        toml::to_string(&t).expect("table serializes")
    }
}
