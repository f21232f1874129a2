use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{Container, ContainerError, ContainerWriter};
use crate::features::{FeatureConfig, Matrix};
use crate::nn::{Model, ModelSpec};
use crate::real::Real;
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "checkpoint";
const FEATURE_KIND: &str = "features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredModel {
    instance: String,
    digest: String,
    spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    models: Vec<StoredModel>,
    provenance: BTreeMap<String, String>,
}

/// Writes every parameter and buffer of `models` as `instance/name`.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    models: &[&Model<T>],
    provenance: &BTreeMap<String, String>,
) -> Result<(), ContainerError> {
    let mut w = ContainerWriter::new();
    let mut stored = Vec::with_capacity(models.len());
    for m in models {
        for (name, t) in m.params().chain(m.buffers()) {
            w.push(format!("{}/{name}", m.instance()), t);
        }
        stored.push(StoredModel {
            instance: m.instance().to_string(),
            digest: m.spec().digest(),
            spec: m.spec().clone(),
        });
    }
    let meta = CheckpointMeta {
        models: stored,
        provenance: provenance.clone(),
    };
    w.write(
        path,
        CHECKPOINT_KIND,
        serde_json::to_value(meta).expect("metadata serializes"),
    )
}

/// A loaded checkpoint; models are rebuilt on demand.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    container: Container,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.meta.provenance
    }

    pub fn instances(&self) -> impl Iterator<Item = &str> {
        self.meta.models.iter().map(|m| m.instance.as_str())
    }

    pub fn spec(&self, instance: &str) -> Option<&ModelSpec> {
        self.meta
            .models
            .iter()
            .find(|m| m.instance == instance)
            .map(|m| &m.spec)
    }

    /// Rebuilds `instance` in evaluation mode. With `expected`, the stored
    /// spec digest must match it.
    pub fn model<T: Real>(
        &self,
        instance: &str,
        expected: Option<&ModelSpec>,
    ) -> Result<Model<T>, ContainerError> {
        let stored = self
            .meta
            .models
            .iter()
            .find(|m| m.instance == instance)
            .ok_or_else(|| ContainerError::Malformed(format!("no model `{instance}`")))?;
        if let Some(spec) = expected {
            let digest = spec.digest();
            if digest != stored.digest {
                return Err(ContainerError::DigestMismatch {
                    instance: instance.to_string(),
                    expected: digest,
                    found: stored.digest.clone(),
                });
            }
        }
        if stored.spec.digest() != stored.digest {
            return Err(ContainerError::Malformed(format!(
                "stored spec of `{instance}` does not match its digest"
            )));
        }
        let mut model = Model::<T>::build(&stored.spec, instance, 0)
            .map_err(|e| ContainerError::Malformed(format!("stored spec of `{instance}`: {e}")))?;
        let names: Vec<String> = model
            .params()
            .chain(model.buffers())
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let t = self.container.tensor::<T>(&format!("{instance}/{name}"))?;
            model
                .set_tensor(&name, t)
                .map_err(|e| ContainerError::Malformed(e.to_string()))?;
        }
        model.eval();
        Ok(model)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ContainerError> {
    let container = Container::read(path)?;
    if container.header.kind != CHECKPOINT_KIND {
        return Err(ContainerError::Malformed(format!(
            "expected a checkpoint, found `{}`",
            container.header.kind
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(container.header.metadata.clone())
        .map_err(|e| ContainerError::Malformed(format!("checkpoint metadata: {e}")))?;
    Ok(Checkpoint { container, meta })
}

/// Log-mel matrices keyed by clip id, with the extraction settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    pub config: FeatureConfig,
    pub clips: BTreeMap<String, Matrix>,
}

impl FeatureStore {
    /// Stored as `f32` `(n_mels, n_frames)` tensors.
    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut w = ContainerWriter::new();
        for (id, m) in &self.clips {
            let data = m.data.iter().map(|&v| v as f32).collect();
            w.push(
                id.clone(),
                &Tensor::new(vec![m.rows, m.cols], data).expect("matrix dims"),
            );
        }
        w.write(
            path,
            FEATURE_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
        )
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let c = Container::read(path)?;
        if c.header.kind != FEATURE_KIND {
            return Err(ContainerError::Malformed(format!(
                "expected a feature store, found `{}`",
                c.header.kind
            )));
        }
        let config = serde_json::from_value(c.header.metadata.clone())
            .map_err(|e| ContainerError::Malformed(format!("feature config: {e}")))?;
        let mut clips = BTreeMap::new();
        for e in &c.header.tensors {
            let t = c.tensor::<f64>(&e.name)?;
            let [rows, cols] = t.shape()[..] else {
                return Err(ContainerError::Malformed(format!(
                    "feature `{}` is not a matrix",
                    e.name
                )));
            };
            clips.insert(
                e.name.clone(),
                Matrix {
                    rows,
                    cols,
                    data: t.into_data(),
                },
            );
        }
        Ok(FeatureStore { config, clips })
    }
}
