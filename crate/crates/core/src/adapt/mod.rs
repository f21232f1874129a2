//! Source pretraining and adversarial adaptation of a target mapper.

mod adam;
mod losses;
mod train;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use losses::{
    discriminator_loss, loss_discriminator, loss_mapper, loss_source, mapper_loss, source_loss,
    D_CLAMP, PROB_EPS,
};
pub use train::{
    accuracy, adapt, argmax_rows, predict, pretrain, AdaptConfig, AdaptEpoch, AdaptationOutcome,
    DiscriminatorSchedule, PretrainConfig, PretrainEpoch, PretrainOutcome, CLASSIFIER,
    DISCRIMINATOR, SOURCE_MAPPER, TARGET_MAPPER,
};

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{stage} diverged at epoch {epoch}, iteration {iteration} (non-finite loss)")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        iteration: usize,
        trace: Trace,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<AutodiffError> for AdaptError {
    fn from(e: AutodiffError) -> Self {
        AdaptError::Nn(NnError::Autodiff(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: String,
    pub value: f64,
}

/// Per-iteration loss values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn values(&self, loss: &str) -> impl Iterator<Item = f64> + '_ {
        let loss = loss.to_string();
        self.records
            .iter()
            .filter(move |r| r.loss == loss)
            .map(|r| r.value)
    }

    /// `epoch,iteration,loss,value` rows with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}
