//! Domain-tagged datasets, corpus splits, oversampling, batch composition and
//! synthetic domain pairs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::Matrix;
use crate::real::Real;
use crate::seed;
use crate::tensor::Tensor;

/// The ten acoustic scenes, in label-index order.
pub const SCENES: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot allocate {requested} {device} clips, only {available} available")]
    Allocation {
        device: Device,
        requested: usize,
        available: usize,
    },
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
}

fn contract<T>(msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Contract(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    A,
    B,
    C,
    SyntheticSource,
    SyntheticTarget,
}

impl Device {
    pub fn as_str(self) -> &'static str {
        match self {
            Device::A => "a",
            Device::B => "b",
            Device::C => "c",
            Device::SyntheticSource => "synthetic_source",
            Device::SyntheticTarget => "synthetic_target",
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Device {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Device::A),
            "b" => Ok(Device::B),
            "c" => Ok(Device::C),
            "synthetic_source" => Ok(Device::SyntheticSource),
            "synthetic_target" => Ok(Device::SyntheticTarget),
            other => contract(format!("unknown device tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

/// One example. Features are shared so oversampled copies stay cheap.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: Arc<Tensor<f32>>,
    pub label: Option<usize>,
    pub device: Device,
    pub clip_id: String,
}

impl Example {
    pub fn new(
        features: Tensor<f32>,
        label: Option<usize>,
        device: Device,
        clip_id: impl Into<String>,
    ) -> Self {
        Example {
            features: Arc::new(features),
            label,
            device,
            clip_id: clip_id.into(),
        }
    }

    /// A `(1, n_mels, n_frames)` example from a log-mel matrix.
    pub fn from_matrix(
        m: &Matrix,
        label: Option<usize>,
        device: Device,
        clip_id: impl Into<String>,
    ) -> Self {
        let data = m.data.iter().map(|&v| v as f32).collect();
        let features = Tensor::new(vec![1, m.rows, m.cols], data).expect("matrix dims match data");
        Example::new(features, label, device, clip_id)
    }
}

/// Labels withheld from training code. Only evaluation reads them.
#[derive(Clone)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        SealedLabels(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for SealedLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedLabels({} entries)", self.0.len())
    }
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub role: DomainRole,
    pub class_names: Vec<String>,
    examples: Vec<Example>,
    sealed: Option<SealedLabels>,
}

impl DomainDataset {
    pub fn new(
        role: DomainRole,
        class_names: Vec<String>,
        examples: Vec<Example>,
    ) -> Result<Self, DataError> {
        let ds = DomainDataset {
            role,
            class_names,
            examples,
            sealed: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// A target dataset whose labels live only in the evaluation channel.
    /// Any labels on `examples` are moved there.
    pub fn sealed_target(
        class_names: Vec<String>,
        mut examples: Vec<Example>,
    ) -> Result<Self, DataError> {
        let mut labels = Vec::with_capacity(examples.len());
        for ex in &mut examples {
            match ex.label.take() {
                Some(l) => labels.push(l),
                None => return contract(format!("clip `{}` has no label to seal", ex.clip_id)),
            }
        }
        let ds = DomainDataset {
            role: DomainRole::Target,
            class_names,
            examples,
            sealed: Some(SealedLabels(labels)),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DataError> {
        let n_classes = self.class_names.len();
        if let Some(first) = self.examples.first() {
            let shape = first.features.shape();
            if let Some(bad) = self.examples.iter().find(|e| e.features.shape() != shape) {
                return contract(format!(
                    "clip `{}` has feature shape {:?}, expected {:?}",
                    bad.clip_id,
                    bad.features.shape(),
                    shape
                ));
            }
        }
        for ex in &self.examples {
            match ex.label {
                Some(l) if l >= n_classes => {
                    return contract(format!(
                        "clip `{}` label {l} outside {n_classes} classes",
                        ex.clip_id
                    ))
                }
                None if self.role == DomainRole::Source => {
                    return contract(format!("source clip `{}` has no label", ex.clip_id))
                }
                _ => {}
            }
        }
        if let Some(sealed) = &self.sealed {
            if sealed.len() != self.examples.len() || sealed.0.iter().any(|&l| l >= n_classes) {
                return contract("sealed labels do not match the examples");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn feature_shape(&self) -> Option<&[usize]> {
        self.examples.first().map(|e| e.features.shape())
    }

    pub fn has_sealed_labels(&self) -> bool {
        self.sealed.is_some()
    }

    /// Examples at `indices` stacked into `[indices.len(), ..feature_shape]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let shape = self.feature_shape().expect("batch of an empty dataset");
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(
                self.examples[i]
                    .features
                    .data()
                    .iter()
                    .map(|&v| T::c(v as f64)),
            );
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        Tensor::new(full, data).expect("stacked features")
    }

    /// One-hot training labels. Sealed labels are never consulted.
    pub fn one_hot<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>, DataError> {
        let k = self.n_classes();
        let mut data = vec![T::zero(); indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            let ex = &self.examples[i];
            let Some(l) = ex.label else {
                return contract(format!("clip `{}` has no training label", ex.clip_id));
            };
            data[row * k + l] = T::one();
        }
        Ok(Tensor::new(vec![indices.len(), k], data).expect("one-hot dims"))
    }

    /// Reference labels for evaluation: open labels, else the sealed channel.
    pub fn evaluation_labels(&self) -> Option<Vec<usize>> {
        if let Some(sealed) = &self.sealed {
            return Some(sealed.0.clone());
        }
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Replaces the sealed labels, e.g. to audit that training ignores them.
    pub fn reseal(&mut self, labels: Vec<usize>) -> Result<(), DataError> {
        let previous = self.sealed.replace(SealedLabels(labels));
        if let Err(e) = self.validate() {
            self.sealed = previous;
            return Err(e);
        }
        Ok(())
    }

    /// The examples at `indices`, in that order, with sealed labels carried.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            role: self.role,
            class_names: self.class_names.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            sealed: self
                .sealed
                .as_ref()
                .map(|s| SealedLabels(indices.iter().map(|&i| s.0[i]).collect())),
        }
    }

    /// Examples recorded by `device`.
    pub fn by_device(&self, device: Device) -> DomainDataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.examples[i].device == device)
            .collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: String,
    pub device: Device,
    pub scene: Option<String>,
}

impl ManifestEntry {
    pub fn label(&self) -> Result<Option<usize>, DataError> {
        match self.scene.as_deref() {
            None => Ok(None),
            Some(s) => scene_index(s).map(Some).ok_or_else(|| {
                DataError::Contract(format!("unknown scene `{s}` for clip `{}`", self.clip_id))
            }),
        }
    }
}

/// Label index of a scene name; spaces, dashes and underscores are
/// interchangeable.
pub fn scene_index(name: &str) -> Option<usize> {
    let norm = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
    SCENES.iter().position(|s| *s == norm)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    clip_id: String,
    path: String,
    device: String,
    #[serde(default)]
    scene: Option<String>,
}

/// Reads a `clip_id,path,device,scene` CSV (scene may be empty).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DataError> {
    parse_manifest(std::fs::File::open(path).map_err(csv::Error::from)?)
}

pub fn parse_manifest(reader: impl std::io::Read) -> Result<Vec<ManifestEntry>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: ManifestRow = row?;
        let entry = ManifestEntry {
            clip_id: row.clip_id,
            path: row.path,
            device: row.device.parse()?,
            scene: row.scene.filter(|s| !s.is_empty()),
        };
        entry.label()?;
        out.push(entry);
    }
    Ok(out)
}

/// Train/validation/test clip counts per device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub counts: BTreeMap<Device, [usize; 3]>,
    pub seed: u64,
}

/// Full-corpus split: device A 5510/612/2518, devices B and C 486/54/180.
pub const CORPUS_SPLIT: [(Device, [usize; 3]); 3] = [
    (Device::A, [5510, 612, 2518]),
    (Device::B, [486, 54, 180]),
    (Device::C, [486, 54, 180]),
];

impl SplitPlan {
    /// Scales the full-corpus split to the device totals present: validation
    /// and test get floored shares, train gets the rest. On the full corpus
    /// this reproduces the corpus split exactly.
    pub fn proportional(totals: &BTreeMap<Device, usize>, seed: u64) -> Self {
        let mut counts = BTreeMap::new();
        for (&device, &total) in totals {
            let reference = CORPUS_SPLIT
                .iter()
                .find(|(d, _)| *d == device)
                .map(|(_, c)| *c)
                .unwrap_or(CORPUS_SPLIT[0].1);
            let whole: usize = reference.iter().sum();
            let val = total * reference[1] / whole;
            let test = total * reference[2] / whole;
            counts.insert(device, [total - val - test, val, test]);
        }
        SplitPlan { counts, seed }
    }

    pub fn for_manifest(manifest: &[ManifestEntry], seed: u64) -> Self {
        let mut totals = BTreeMap::new();
        for e in manifest {
            *totals.entry(e.device).or_insert(0) += 1;
        }
        SplitPlan::proportional(&totals, seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<ManifestEntry>,
    pub validation: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Seeded per-device shuffle, then consecutive allocation to train,
/// validation and test. Clips of devices absent from the plan are skipped.
pub fn split_dataset(manifest: &[ManifestEntry], plan: &SplitPlan) -> Result<Split, DataError> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = manifest.iter().find(|e| !seen.insert(e.clip_id.as_str())) {
        return contract(format!("clip `{}` listed twice", dup.clip_id));
    }
    let mut split = Split::default();
    for (&device, counts) in &plan.counts {
        let mut clips: Vec<&ManifestEntry> =
            manifest.iter().filter(|e| e.device == device).collect();
        let requested: usize = counts.iter().sum();
        if requested > clips.len() {
            return Err(DataError::Allocation {
                device,
                requested,
                available: clips.len(),
            });
        }
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        clips.shuffle(&mut seed::stream(plan.seed, &format!("split/{device}")));
        let mut it = clips.into_iter().cloned();
        split.train.extend(it.by_ref().take(counts[0]));
        split.validation.extend(it.by_ref().take(counts[1]));
        split.test.extend(it.by_ref().take(counts[2]));
    }
    Ok(split)
}

/// Indices `0..n_t` expanded to exactly `n_source` entries: every index
/// `floor(n_source / n_t)` times, the remainder drawn without replacement,
/// then shuffled.
pub fn oversample_indices<R: Rng + ?Sized>(n_t: usize, n_source: usize, rng: &mut R) -> Vec<usize> {
    assert!(n_t > 0, "oversampling an empty set");
    let reps = n_source / n_t;
    let mut out: Vec<usize> = (0..reps).flat_map(|_| 0..n_t).collect();
    out.extend(index::sample(rng, n_t, n_source % n_t));
    out.shuffle(rng);
    out
}

pub fn oversample_target(
    target: &DomainDataset,
    n_source: usize,
    seed: u64,
) -> Result<DomainDataset, DataError> {
    if target.is_empty() {
        return contract("cannot oversample an empty target set");
    }
    let idx = oversample_indices(
        target.len(),
        n_source,
        &mut seed::stream(seed, "oversample"),
    );
    Ok(target.subset(&idx))
}

/// Source-only minibatches: a fresh seeded shuffle each epoch, consecutive
/// chunks, the final short chunk kept.
pub struct PretrainBatches {
    n: usize,
    batch_size: usize,
    rng: seed::Rng,
}

impl PretrainBatches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        PretrainBatches {
            n,
            batch_size,
            rng: seed::stream(seed, "pretrain-batches"),
        }
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

pub fn compose_pretrain_batches(n: usize, batch_size: usize, seed: u64) -> PretrainBatches {
    PretrainBatches::new(n, batch_size, seed)
}

/// Adaptation batch composition: source examples plus a fixed number drawn
/// from each target stream (3 + 3 for devices B and C, or 6 from a single
/// synthetic target).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub source: usize,
    pub per_target: Vec<usize>,
}

impl Composition {
    pub fn devices() -> Self {
        Composition {
            source: 10,
            per_target: vec![3, 3],
        }
    }

    pub fn single() -> Self {
        Composition {
            source: 10,
            per_target: vec![6],
        }
    }

    pub fn target_total(&self) -> usize {
        self.per_target.iter().sum()
    }
}

impl Default for Composition {
    fn default() -> Self {
        Composition::devices()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptBatch {
    /// Indices into the source set.
    pub source: Vec<usize>,
    /// Per target stream, indices into that stream's original set.
    pub target: Vec<Vec<usize>>,
}

/// Each target stream is oversampled once to `n_source / streams`; an epoch
/// reshuffles every stream and covers the oversampled targets once, dropping
/// the remainder. The source stream cycles with a reshuffle whenever it runs
/// out.
pub struct AdaptBatches {
    composition: Composition,
    n_source: usize,
    oversampled: Vec<Vec<usize>>,
    source_order: Vec<usize>,
    source_pos: usize,
    rng: seed::Rng,
}

impl AdaptBatches {
    pub fn new(
        n_source: usize,
        target_sizes: &[usize],
        composition: Composition,
        seed: u64,
    ) -> Result<Self, DataError> {
        if composition.source == 0 || composition.per_target.contains(&0) {
            return contract("batch composition counts must be at least 1");
        }
        if target_sizes.len() != composition.per_target.len() {
            return contract(format!(
                "{} target sets for a composition with {} target streams",
                target_sizes.len(),
                composition.per_target.len()
            ));
        }
        if n_source == 0 || target_sizes.contains(&0) {
            return contract("source and target sets must be non-empty");
        }
        let per_stream = n_source / target_sizes.len();
        let oversampled = target_sizes
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                oversample_indices(
                    n,
                    per_stream,
                    &mut seed::stream(seed, &format!("oversample/{t}")),
                )
            })
            .collect();
        Ok(AdaptBatches {
            composition,
            n_source,
            oversampled,
            source_order: Vec::new(),
            source_pos: 0,
            rng: seed::stream(seed, "adapt-batches"),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.oversampled
            .iter()
            .zip(&self.composition.per_target)
            .map(|(o, &k)| o.len() / k)
            .min()
            .unwrap_or(0)
    }

    fn next_source(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.source_pos == self.source_order.len() {
                self.source_order = (0..self.n_source).collect();
                self.source_order.shuffle(&mut self.rng);
                self.source_pos = 0;
            }
            out.push(self.source_order[self.source_pos]);
            self.source_pos += 1;
        }
        out
    }

    pub fn next_epoch(&mut self) -> Vec<AdaptBatch> {
        let n_batches = self.batches_per_epoch();
        for stream in &mut self.oversampled {
            stream.shuffle(&mut self.rng);
        }
        let per_target = self.composition.per_target.clone();
        (0..n_batches)
            .map(|b| AdaptBatch {
                source: self.next_source(self.composition.source),
                target: self
                    .oversampled
                    .iter()
                    .zip(&per_target)
                    .map(|(stream, &k)| stream[b * k..(b + 1) * k].to_vec())
                    .collect(),
            })
            .collect()
    }
}

pub fn compose_adapt_batches(
    n_source: usize,
    target_sizes: &[usize],
    composition: Composition,
    seed: u64,
) -> Result<AdaptBatches, DataError> {
    AdaptBatches::new(n_source, target_sizes, composition, seed)
}

/// Two-dimensional Gaussian class blobs and an affine-plus-noise shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShiftConfig {
    pub n_classes: usize,
    pub per_class: usize,
    /// Class means sit evenly on a circle of this radius.
    pub radius: f64,
    /// Per-axis standard deviation of every blob.
    pub spread: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub gain: [f64; 2],
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticShiftConfig {
    fn default() -> Self {
        SyntheticShiftConfig {
            n_classes: 3,
            per_class: 500,
            radius: 2.0,
            spread: 0.5,
            rotation_deg: 35.0,
            translation: [2.0, -1.0],
            gain: [1.4, 0.8],
            noise: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticShiftConfig {
    /// Same base distribution, no shift.
    pub fn unshifted(&self) -> Self {
        SyntheticShiftConfig {
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            gain: [1.0, 1.0],
            noise: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let finite = [self.radius, self.spread, self.rotation_deg, self.noise]
            .into_iter()
            .chain(self.translation)
            .chain(self.gain)
            .all(f64::is_finite);
        if !finite || self.noise < 0.0 || self.spread < 0.0 {
            return contract(
                "synthetic shift parameters must be finite and nonnegative where applicable",
            );
        }
        if self.n_classes < 1 || self.per_class < 1 {
            return contract("synthetic config needs at least one class and one sample per class");
        }
        Ok(())
    }

    pub fn class_mean(&self, class: usize) -> [f64; 2] {
        let angle = 2.0 * PI * class as f64 / self.n_classes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }

    /// The deterministic part of the shift: `gain ⊙ (R x) + translation`.
    pub fn transform(&self, x: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let r = [c * x[0] - s * x[1], s * x[0] + c * x[1]];
        [
            self.gain[0] * r[0] + self.translation[0],
            self.gain[1] * r[1] + self.translation[1],
        ]
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|k| format!("class_{k}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: DomainDataset,
    /// Labels sealed for evaluation only.
    pub target: DomainDataset,
}

fn blob_samples<R: Rng + ?Sized>(
    cfg: &SyntheticShiftConfig,
    rng: &mut R,
) -> Vec<([f64; 2], usize)> {
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    for k in 0..cfg.n_classes {
        let m = cfg.class_mean(k);
        for _ in 0..cfg.per_class {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            out.push(([m[0] + cfg.spread * a, m[1] + cfg.spread * b], k));
        }
    }
    out
}

fn to_example(x: [f64; 2], label: usize, device: Device, id: String) -> Example {
    Example::new(
        Tensor::new(vec![2], vec![x[0] as f32, x[1] as f32]).expect("2-vector"),
        Some(label),
        device,
        id,
    )
}

/// Source and target drawn independently from the same blobs; the target
/// draws are then shifted.
pub fn synth_domain_pair(cfg: &SyntheticShiftConfig) -> Result<SyntheticPair, DataError> {
    cfg.validate()?;
    let names = cfg.class_names();
    let src = blob_samples(cfg, &mut seed::stream(cfg.seed, "synth/source"));
    let mut rng = seed::stream(cfg.seed, "synth/target");
    let tgt = blob_samples(cfg, &mut rng);

    let source = src
        .into_iter()
        .enumerate()
        .map(|(i, (x, k))| to_example(x, k, Device::SyntheticSource, format!("s{i:05}")))
        .collect();
    let target = tgt
        .into_iter()
        .enumerate()
        .map(|(i, (x, k))| {
            let [u, v] = cfg.transform(x);
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            to_example(
                [u + cfg.noise * a, v + cfg.noise * b],
                k,
                Device::SyntheticTarget,
                format!("t{i:05}"),
            )
        })
        .collect();
    Ok(SyntheticPair {
        source: DomainDataset::new(DomainRole::Source, names.clone(), source)?,
        target: DomainDataset::sealed_target(names, target)?,
    })
}

/// Per-band log-domain offset `(gain + tilt·log2(center / 1 kHz))·ln10/10`.
pub fn channel_offsets(centers_hz: &[f64], tilt_db_per_octave: f64, gain_db: f64) -> Vec<f64> {
    let db_to_ln = 10f64.ln() / 10.0;
    centers_hz
        .iter()
        .map(|&c| (gain_db + tilt_db_per_octave * (c / 1000.0).log2()) * db_to_ln)
        .collect()
}

/// Applies a device-like coloration to log-mel features (`n_mels × frames`).
/// A positive `noise_floor` (linear energy) raises every entry to at least
/// `ln(noise_floor)`.
pub fn apply_channel_shift(
    features: &Matrix,
    centers_hz: &[f64],
    tilt_db_per_octave: f64,
    gain_db: f64,
    noise_floor: f64,
) -> Result<Matrix, DataError> {
    if centers_hz.len() != features.rows {
        return contract(format!(
            "{} band centers for {} mel bands",
            centers_hz.len(),
            features.rows
        ));
    }
    if ![tilt_db_per_octave, gain_db, noise_floor]
        .iter()
        .all(|v| v.is_finite())
        || noise_floor < 0.0
    {
        return contract("channel shift parameters must be finite, noise floor nonnegative");
    }
    let offsets = channel_offsets(centers_hz, tilt_db_per_octave, gain_db);
    let floor = (noise_floor > 0.0).then(|| noise_floor.ln());
    let mut out = features.clone();
    for (m, off) in offsets.iter().enumerate() {
        for v in &mut out.data[m * out.cols..(m + 1) * out.cols] {
            *v += off;
            if let Some(f) = floor {
                *v = v.max(f);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
