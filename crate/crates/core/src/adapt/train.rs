use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::losses::{discriminator_loss, mapper_loss, source_loss};
use super::{AdaptError, Trace, TraceRecord};
use crate::autodiff::{GradientMap, Graph};
use crate::data::{compose_adapt_batches, compose_pretrain_batches, Composition, DomainDataset};
use crate::nn::{Model, ModelSpec, Pass};
use crate::real::Real;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 38,
            epochs: 350,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// When the discriminator is updated during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorSchedule {
    /// One update from the current batch on every `d_every`-th iteration.
    EveryNth,
    /// Gradients from every iteration are averaged and applied on every
    /// `d_every`-th iteration.
    Accumulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub composition: Composition,
    pub epochs: usize,
    pub lr: f64,
    /// Discriminator learning rate; defaults to `lr`.
    pub d_lr: Option<f64>,
    pub d_every: usize,
    pub d_schedule: DiscriminatorSchedule,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            composition: Composition::devices(),
            epochs: 300,
            lr: 1e-4,
            d_lr: None,
            d_every: 10,
            d_schedule: DiscriminatorSchedule::EveryNth,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub mapper: Model<T>,
    pub classifier: Model<T>,
    pub epochs: Vec<PretrainEpoch>,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub mapper_loss: f64,
    /// Mean over the discriminator updates of this epoch, if any.
    pub discriminator_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome<T> {
    pub target: Model<T>,
    pub source: Model<T>,
    pub classifier: Model<T>,
    pub discriminator: Model<T>,
    pub epochs: Vec<AdaptEpoch>,
    pub trace: Trace,
    pub iterations: usize,
    pub discriminator_updates: usize,
}

/// Instance names used in parameter ids.
pub const SOURCE_MAPPER: &str = "m_s";
pub const TARGET_MAPPER: &str = "m_t";
pub const CLASSIFIER: &str = "c";
pub const DISCRIMINATOR: &str = "d";

fn finite_or_diverged(
    value: f64,
    stage: &'static str,
    epoch: usize,
    iteration: usize,
    trace: &Trace,
) -> Result<(), AdaptError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(AdaptError::Divergence {
            stage,
            epoch,
            iteration,
            trace: trace.clone(),
        })
    }
}

fn scalar<T: Real>(g: &Graph<T>, v: crate::autodiff::Var) -> Result<f64, AdaptError> {
    Ok(g.value(v)?.data()[0].as_f64())
}

/// Jointly trains `mapper` and `classifier` on labeled source data with the
/// cross-entropy loss. Both are returned in evaluation mode.
pub fn pretrain<T: Real>(
    mut mapper: Model<T>,
    mut classifier: Model<T>,
    train: &DomainDataset,
    validation: Option<&DomainDataset>,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<T>, AdaptError> {
    if train.is_empty() {
        return Err(AdaptError::Contract(
            "pretraining needs a non-empty source set".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(AdaptError::Contract(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut batches = compose_pretrain_batches(train.len(), cfg.batch_size, cfg.seed);
    let mut rng = seed::stream(cfg.seed, "pretrain/dropout");
    let mut trace = Trace::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0;
    mapper.train();
    classifier.train();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let epoch_batches = batches.next_epoch();
        for idx in &epoch_batches {
            iteration += 1;
            let mut g = Graph::new();
            let x = g.constant(train.batch::<T>(idx))?;
            let y = g.constant(train.one_hot::<T>(idx)?)?;
            let h = mapper.forward(&mut g, x, Pass::TRAIN, &mut rng)?;
            let p = classifier.forward(&mut g, h, Pass::TRAIN, &mut rng)?;
            let loss = source_loss(&mut g, p, y)?;
            let value = scalar(&g, loss)?;
            trace.push(epoch, iteration, "L_S", value);
            finite_or_diverged(value, "pretrain", epoch, iteration, &trace)?;
            let grads = g.backward(loss)?;
            state.update_model(&mut mapper, &grads, &adam)?;
            state.update_model(&mut classifier, &grads, &adam)?;
            total += value;
        }
        mapper.eval();
        classifier.eval();
        let validation_accuracy = match validation {
            Some(v) if !v.is_empty() => Some(accuracy(&mapper, &classifier, v)?),
            _ => None,
        };
        mapper.train();
        classifier.train();
        epochs.push(PretrainEpoch {
            epoch,
            loss: total / epoch_batches.len() as f64,
            validation_accuracy,
        });
    }
    mapper.eval();
    classifier.eval();
    Ok(PretrainOutcome {
        mapper,
        classifier,
        epochs,
        trace,
    })
}

/// Concatenated target examples of one adaptation batch, streams in order.
fn target_batch<T: Real>(targets: &[&DomainDataset], idx: &[Vec<usize>]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = targets
        .iter()
        .zip(idx)
        .map(|(ds, i)| ds.batch::<T>(i))
        .collect();
    parts
        .iter()
        .skip(1)
        .fold(parts[0].clone(), |acc, p| concat_rows(&acc, p))
}

/// Adversarial adaptation of a target mapper initialized from `source`.
///
/// Each iteration updates the target mapper on the mapper loss with the
/// discriminator and classifier frozen. The discriminator is updated on
/// every `d_every`-th iteration from the frozen source features and the
/// current target features. `source` and `classifier` are never modified.
pub fn adapt<T: Real>(
    source: &Model<T>,
    classifier: &Model<T>,
    disc_spec: &ModelSpec,
    source_set: &DomainDataset,
    targets: &[&DomainDataset],
    cfg: &AdaptConfig,
) -> Result<AdaptationOutcome<T>, AdaptError> {
    if cfg.d_every == 0 || cfg.lr <= 0.0 || cfg.d_lr.is_some_and(|v| v <= 0.0) {
        return Err(AdaptError::Contract(
            "discriminator cadence and learning rates must be positive".into(),
        ));
    }
    let mut m_s = source.clone();
    m_s.eval();
    let mut c = classifier.clone();
    c.eval();
    let mut m_t = m_s.renamed(TARGET_MAPPER);
    let mut d = Model::build(
        disc_spec,
        DISCRIMINATOR,
        seed::derive(cfg.seed, "adapt/discriminator"),
    )?;
    let feature_shape = m_s.spec().output_shape()?;
    if disc_spec.input_shape != feature_shape {
        return Err(AdaptError::Contract(format!(
            "discriminator expects {:?}, mapper produces {:?}",
            disc_spec.input_shape, feature_shape
        )));
    }
    let sizes: Vec<usize> = targets.iter().map(|t| t.len()).collect();
    let mut batches =
        compose_adapt_batches(source_set.len(), &sizes, cfg.composition.clone(), cfg.seed)?;

    let mt_adam = AdamConfig::with_lr(cfg.lr);
    let d_adam = AdamConfig::with_lr(cfg.d_lr.unwrap_or(cfg.lr));
    let (mut mt_state, mut d_state) = (AdamState::new(), AdamState::new());
    let mut rng = seed::stream(cfg.seed, "adapt/dropout");
    let mut pending: Option<GradientMap<T>> = None;
    let mut pending_count = 0usize;
    let mut trace = Trace::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let (mut iteration, mut d_updates) = (0usize, 0usize);

    for epoch in 1..=cfg.epochs {
        let (mut mt_total, mut d_total, mut d_count) = (0.0, 0.0, 0usize);
        let epoch_batches = batches.next_epoch();
        for batch in &epoch_batches {
            iteration += 1;
            let xs = source_set.batch::<T>(&batch.source);
            let ys = source_set.one_hot::<T>(&batch.source)?;
            let xt = target_batch::<T>(targets, &batch.target);

            let (value, grads) = mapper_step(&mut m_t, &mut d, &mut c, &xs, ys, &xt, &mut rng)?;
            trace.push(epoch, iteration, "L_MT", value);
            finite_or_diverged(value, "adapt", epoch, iteration, &trace)?;
            mt_state.update_model(&mut m_t, &grads, &mt_adam)?;
            mt_total += value;

            let due = iteration % cfg.d_every == 0;
            if !due && cfg.d_schedule == DiscriminatorSchedule::EveryNth {
                continue;
            }

            let (value, grads) = discriminator_step(&m_s, &mut m_t, &mut d, &xs, &xt, &mut rng)?;
            finite_or_diverged(value, "adapt", epoch, iteration, &trace)?;
            match cfg.d_schedule {
                DiscriminatorSchedule::EveryNth => {
                    d_state.update_model(&mut d, &grads, &d_adam)?;
                }
                DiscriminatorSchedule::Accumulate => {
                    match pending.as_mut() {
                        Some(acc) => acc.accumulate(&grads),
                        None => pending = Some(grads),
                    }
                    pending_count += 1;
                    if !due {
                        continue;
                    }
                    let mut acc = pending.take().expect("accumulated at least once");
                    acc.scale(T::c(1.0 / pending_count as f64));
                    pending_count = 0;
                    d_state.update_model(&mut d, &acc, &d_adam)?;
                }
            }
            d_updates += 1;
            trace.push(epoch, iteration, "L_D", value);
            d_total += value;
            d_count += 1;
        }
        epochs.push(AdaptEpoch {
            epoch,
            mapper_loss: if epoch_batches.is_empty() {
                0.0
            } else {
                mt_total / epoch_batches.len() as f64
            },
            discriminator_loss: (d_count > 0).then(|| d_total / d_count as f64),
        });
    }
    m_t.eval();
    d.eval();
    Ok(AdaptationOutcome {
        target: m_t,
        source: m_s,
        classifier: c,
        discriminator: d,
        epochs,
        trace,
        iterations: iteration,
        discriminator_updates: d_updates,
    })
}

/// Mapper loss and its gradients. Only the target mapper is trainable; the
/// discriminator and classifier enter as constants in evaluation mode.
pub(crate) fn mapper_step<T: Real, R: Rng + ?Sized>(
    m_t: &mut Model<T>,
    d: &mut Model<T>,
    c: &mut Model<T>,
    xs: &Tensor<T>,
    ys: Tensor<T>,
    xt: &Tensor<T>,
    rng: &mut R,
) -> Result<(f64, GradientMap<T>), AdaptError> {
    m_t.train();
    d.eval();
    c.eval();
    let mut g = Graph::new();
    let xt_v = g.constant(xt.clone())?;
    let ht = m_t.forward(&mut g, xt_v, Pass::TRAIN, rng)?;
    let dt = d.forward(&mut g, ht, Pass::FROZEN, rng)?;
    let xs_v = g.constant(xs.clone())?;
    // Statistics track target data only, so the source pass leaves them alone.
    let hs = m_t.forward(
        &mut g,
        xs_v,
        Pass {
            trainable: true,
            update_stats: false,
        },
        rng,
    )?;
    let ps = c.forward(&mut g, hs, Pass::FROZEN, rng)?;
    let ys_v = g.constant(ys)?;
    let loss = mapper_loss(&mut g, dt, ps, ys_v)?;
    let value = scalar(&g, loss)?;
    Ok((value, g.backward(loss)?))
}

/// Discriminator loss and its gradients on the features of both mappers,
/// which enter as constants. Leaves the discriminator in evaluation mode.
pub(crate) fn discriminator_step<T: Real, R: Rng + ?Sized>(
    m_s: &Model<T>,
    m_t: &mut Model<T>,
    d: &mut Model<T>,
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    rng: &mut R,
) -> Result<(f64, GradientMap<T>), AdaptError> {
    let hs = m_s.infer(xs)?;
    let ht = {
        let mut g = Graph::new();
        let x = g.constant(xt.clone())?;
        let h = m_t.forward(&mut g, x, Pass::FROZEN, rng)?;
        g.value(h)?.clone()
    };
    let ns = hs.shape()[0];
    d.train();
    let mut g = Graph::new();
    let f = g.constant(concat_rows(&hs, &ht))?;
    let out = d.forward(&mut g, f, Pass::TRAIN, rng)?;
    let n = g.shape(out)?[0];
    let d_s = g.slice_rows(out, 0, ns)?;
    let d_t = g.slice_rows(out, ns, n)?;
    let loss = discriminator_loss(&mut g, d_s, d_t)?;
    let value = scalar(&g, loss)?;
    let grads = g.backward(loss)?;
    d.eval();
    Ok((value, grads))
}

fn concat_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("equal trailing shapes")
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let k = probs.shape().last().copied().unwrap_or(1).max(1);
    probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
        })
        .collect()
}

/// Predicted class of every example of `ds`, in order.
pub fn predict<T: Real>(
    mapper: &Model<T>,
    classifier: &Model<T>,
    ds: &DomainDataset,
) -> Result<Vec<usize>, AdaptError> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(CHUNK) {
        let h = mapper.infer(&ds.batch::<T>(idx))?;
        out.extend(argmax_rows(&classifier.infer(&h)?));
    }
    Ok(out)
}

/// Fraction of examples whose prediction matches the evaluation label.
pub fn accuracy<T: Real>(
    mapper: &Model<T>,
    classifier: &Model<T>,
    ds: &DomainDataset,
) -> Result<f64, AdaptError> {
    let labels = ds
        .evaluation_labels()
        .ok_or_else(|| AdaptError::Contract("dataset has no evaluation labels".into()))?;
    if labels.is_empty() {
        return Err(AdaptError::Contract("accuracy of an empty dataset".into()));
    }
    let preds = predict(mapper, classifier, ds)?;
    Ok(preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

impl Trace {
    fn push(&mut self, epoch: usize, iteration: usize, loss: &'static str, value: f64) {
        self.records.push(TraceRecord {
            epoch,
            iteration,
            loss: loss.to_string(),
            value,
        });
    }
}
