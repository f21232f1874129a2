//! Evaluation, run configuration, orchestration and on-disk artifacts.

mod checkpoint;
mod config;
mod container;
mod evaluation;
mod run;

use std::path::PathBuf;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FeatureStore};
pub use config::{
    CheckpointPaths, DatasetConfig, Mode, ModelsConfig, Overrides, RunConfig, OUT_ROOT_ENV,
};
pub use container::{
    write_atomic, Container, ContainerError, ContainerWriter, Header, TensorEntry, MAGIC, VERSION,
};
pub use evaluation::{
    evaluate, normalize_confusion, AccuracyTable, ComparisonReport, ConfusionMatrix,
    DeviceAccuracy, DomainEvaluation, EvaluationReport, ModelIdentity, NormalizedConfusion,
};
pub use run::{
    discriminator_accuracy, run_experiment, synth_pairs, synth_trial, RunSummary, SynthTrial,
};

use crate::adapt::AdaptError;
use crate::data::DataError;
use crate::features::FeatureError;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ReportError {
    /// Whether the run stopped on a non-finite loss.
    pub fn is_divergence(&self) -> bool {
        matches!(self, ReportError::Adapt(AdaptError::Divergence { .. }))
    }
}

#[cfg(test)]
mod tests;
