//! End-to-end orchestration of the run modes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint, FeatureStore};
use super::config::{Mode, RunConfig};
use super::container::write_atomic;
use super::evaluation::{
    evaluate, AccuracyTable, ComparisonReport, DomainEvaluation, EvaluationReport, ModelIdentity,
};
use super::ReportError;
use crate::adapt::{
    adapt, pretrain, AdaptError, AdaptationOutcome, PretrainOutcome, Trace, CLASSIFIER,
    SOURCE_MAPPER, TARGET_MAPPER,
};
use crate::data::{
    read_manifest, split_dataset, synth_domain_pair, DomainDataset, DomainRole, Example,
    ManifestEntry, Split, SplitPlan, SyntheticPair, SyntheticShiftConfig, SCENES,
};
use crate::features::{read_wav, LogMel};
use crate::nn::{Architecture, Model};
use crate::real::{Precision, Real};
use crate::seed;
use crate::tensor::Tensor;

/// What a run wrote and a human-readable summary of it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub out: PathBuf,
    pub config_digest: String,
    pub artifacts: Vec<PathBuf>,
    pub text: String,
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self, ReportError> {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), ReportError> {
        let p = self.path(name);
        Ok(write_atomic(&p, bytes)?)
    }

    fn json<S: serde::Serialize>(&mut self, name: &str, value: &S) -> Result<(), ReportError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
        bytes.push(b'\n');
        self.bytes(name, &bytes)
    }

    fn trace(&mut self, name: &str, trace: &Trace) -> Result<(), ReportError> {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        self.bytes(name, &buf)
    }

    fn confusion(&mut self, name: &str, eval: &DomainEvaluation) -> Result<(), ReportError> {
        let mut buf = Vec::new();
        eval.confusion.write_csv(&mut buf)?;
        self.bytes(name, &buf)
    }
}

/// Writes the trace carried by a divergence before passing the error on.
fn keep_trace<T>(
    art: &mut Artifacts,
    name: &str,
    r: Result<T, AdaptError>,
) -> Result<T, ReportError> {
    if let Err(AdaptError::Divergence { trace, .. }) = &r {
        art.trace(name, trace)?;
    }
    Ok(r?)
}

fn provenance(cfg: &RunConfig, stage: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_digest".to_string(), cfg.digest()),
        ("mode".to_string(), cfg.mode.to_string()),
        ("precision".to_string(), cfg.precision.as_str().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("stage".to_string(), stage.to_string()),
    ])
}

/// Runs the configured mode and writes its artifacts under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary, ReportError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig) -> Result<RunSummary, ReportError> {
    let mut art = Artifacts::new(&cfg.out)?;
    art.bytes("config.toml", cfg.to_toml().as_bytes())?;
    let text = match cfg.mode {
        Mode::Synth => run_synth::<T>(cfg, &mut art)?,
        Mode::Features => run_features(cfg, &mut art)?,
        Mode::Pretrain => run_pretrain::<T>(cfg, &mut art)?,
        Mode::Adapt => run_adapt::<T>(cfg, &mut art)?,
        Mode::Evaluate => run_evaluate::<T>(cfg, &mut art)?,
    };
    Ok(RunSummary {
        mode: cfg.mode,
        out: cfg.out.clone(),
        config_digest: cfg.digest(),
        artifacts: art.written,
        text,
    })
}

/// Everything produced by one synthetic experiment.
#[derive(Debug, Clone)]
pub struct SynthTrial<T> {
    pub pretrained: PretrainOutcome<T>,
    pub adapted: AdaptationOutcome<T>,
    pub comparison: ComparisonReport,
    /// Discriminator accuracy on the held-out pair.
    pub held_out_discriminator_accuracy: f64,
}

/// The training pair and an independently drawn held-out pair.
pub fn synth_pairs(cfg: &RunConfig) -> Result<(SyntheticPair, SyntheticPair), ReportError> {
    let train = synth_domain_pair(&cfg.synthetic)?;
    let held_out = SyntheticShiftConfig {
        seed: seed::derive(cfg.seed, "synthetic/held_out"),
        ..cfg.synthetic.clone()
    };
    Ok((train, synth_domain_pair(&held_out)?))
}

fn build_source_models<T: Real>(
    cfg: &RunConfig,
    arch: &Architecture,
) -> Result<(Model<T>, Model<T>), ReportError> {
    Ok((
        Model::build(
            &arch.mapper,
            SOURCE_MAPPER,
            seed::derive(cfg.seed, "init/mapper"),
        )?,
        Model::build(
            &arch.classifier,
            CLASSIFIER,
            seed::derive(cfg.seed, "init/classifier"),
        )?,
    ))
}

fn architecture(cfg: &RunConfig, example_shape: Vec<usize>) -> Result<Architecture, ReportError> {
    let m = &cfg.models;
    Ok(Architecture::resolve(
        &m.mapper,
        &m.classifier,
        &m.discriminator,
        example_shape,
        &m.options,
    )?)
}

fn domain_report<T: Real>(
    cfg: &RunConfig,
    model: ModelIdentity,
    mapper: &Model<T>,
    classifier: &Model<T>,
    domains: &[(&str, &DomainDataset)],
) -> Result<EvaluationReport, ReportError> {
    let mut out = BTreeMap::new();
    for (name, ds) in domains {
        out.insert(name.to_string(), evaluate(mapper, classifier, ds)?);
    }
    Ok(EvaluationReport {
        model,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        domains: out,
    })
}

/// Fraction of held-out source features the discriminator scores above 0.5
/// plus target features at or below it.
pub fn discriminator_accuracy<T: Real>(
    source_mapper: &Model<T>,
    target_mapper: &Model<T>,
    discriminator: &Model<T>,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<f64, ReportError> {
    if source.is_empty() || target.is_empty() {
        return Err(ReportError::Contract(
            "discriminator accuracy needs both domains".into(),
        ));
    }
    let score = |m: &Model<T>, ds: &DomainDataset| -> Result<Tensor<T>, ReportError> {
        let all: Vec<usize> = (0..ds.len()).collect();
        Ok(discriminator.infer(&m.infer(&ds.batch::<T>(&all))?)?)
    };
    let half = T::c(0.5);
    let ds = score(source_mapper, source)?;
    let dt = score(target_mapper, target)?;
    let hits = ds.data().iter().filter(|&&v| v > half).count()
        + dt.data().iter().filter(|&&v| v <= half).count();
    Ok(hits as f64 / (ds.len() + dt.len()) as f64)
}

/// Pretrains on the synthetic source, adapts to the synthetic target and
/// evaluates both models on a held-out pair. Writes nothing.
pub fn synth_trial<T: Real>(cfg: &RunConfig) -> Result<SynthTrial<T>, ReportError> {
    let (train, held_out) = synth_pairs(cfg)?;
    let arch = architecture(cfg, vec![2])?;
    let (m, c) = build_source_models::<T>(cfg, &arch)?;
    let pretrained = pretrain(m, c, &train.source, Some(&held_out.source), &cfg.pretrain)?;
    let adapted = adapt(
        &pretrained.mapper,
        &pretrained.classifier,
        &arch.discriminator,
        &train.source,
        &[&train.target],
        &cfg.adapt,
    )?;
    synth_comparison(cfg, &held_out, pretrained, adapted)
}

fn synth_comparison<T: Real>(
    cfg: &RunConfig,
    held_out: &SyntheticPair,
    pretrained: PretrainOutcome<T>,
    adapted: AdaptationOutcome<T>,
) -> Result<SynthTrial<T>, ReportError> {
    let domains = [("source", &held_out.source), ("target", &held_out.target)];
    let before = domain_report(
        cfg,
        ModelIdentity::NonAdapted,
        &pretrained.mapper,
        &pretrained.classifier,
        &domains,
    )?;
    let after = domain_report(
        cfg,
        ModelIdentity::Adapted,
        &adapted.target,
        &adapted.classifier,
        &domains,
    )?;
    let held_out_discriminator_accuracy = discriminator_accuracy(
        &adapted.source,
        &adapted.target,
        &adapted.discriminator,
        &held_out.source,
        &held_out.target,
    )?;
    let comparison = ComparisonReport {
        seed: cfg.seed,
        config_digest: cfg.digest(),
        table: AccuracyTable::from_reports(&before, &after),
        non_adapted: before,
        adapted: after,
    };
    Ok(SynthTrial {
        pretrained,
        adapted,
        comparison,
        held_out_discriminator_accuracy,
    })
}

fn write_comparison(art: &mut Artifacts, report: &ComparisonReport) -> Result<(), ReportError> {
    art.json("report.json", report)?;
    for r in [&report.non_adapted, &report.adapted] {
        for (domain, eval) in &r.domains {
            art.confusion(
                &format!("confusion_{}_{domain}.csv", r.model.as_str()),
                eval,
            )?;
        }
    }
    Ok(())
}

fn run_synth<T: Real>(cfg: &RunConfig, art: &mut Artifacts) -> Result<String, ReportError> {
    let (train, held_out) = synth_pairs(cfg)?;
    let arch = architecture(cfg, vec![2])?;
    let (m, c) = build_source_models::<T>(cfg, &arch)?;
    let pretrained = keep_trace(
        art,
        "pretrain_trace.csv",
        pretrain(m, c, &train.source, Some(&held_out.source), &cfg.pretrain),
    )?;
    art.trace("pretrain_trace.csv", &pretrained.trace)?;
    let p = art.path("pretrained.adda");
    save_checkpoint(
        &p,
        &[&pretrained.mapper, &pretrained.classifier],
        &provenance(cfg, "pretrain"),
    )?;

    let adapted = keep_trace(
        art,
        "adapt_trace.csv",
        adapt(
            &pretrained.mapper,
            &pretrained.classifier,
            &arch.discriminator,
            &train.source,
            &[&train.target],
            &cfg.adapt,
        ),
    )?;
    art.trace("adapt_trace.csv", &adapted.trace)?;
    let p = art.path("adapted.adda");
    save_checkpoint(
        &p,
        &[&adapted.target, &adapted.classifier, &adapted.discriminator],
        &provenance(cfg, "adapt"),
    )?;

    let trial = synth_comparison(cfg, &held_out, pretrained, adapted)?;
    write_comparison(art, &trial.comparison)?;
    Ok(format!(
        "{}\nheld-out discriminator accuracy {:.3}\n",
        trial.comparison.table.render(),
        trial.held_out_discriminator_accuracy
    ))
}

fn manifest_dir(cfg: &RunConfig) -> PathBuf {
    let manifest = cfg.dataset.manifest.as_deref().expect("validated");
    cfg.dataset
        .audio_root
        .clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn run_features(cfg: &RunConfig, art: &mut Artifacts) -> Result<String, ReportError> {
    let manifest = read_manifest(cfg.dataset.manifest.as_deref().expect("validated"))?;
    let root = manifest_dir(cfg);
    let extractor = LogMel::new(cfg.features.clone())?;
    let mut store = FeatureStore {
        config: cfg.features.clone(),
        clips: BTreeMap::new(),
    };
    for entry in &manifest {
        let path = root.join(&entry.path);
        let clip = read_wav(&path)
            .map_err(|e| ReportError::Contract(format!("{}: {e}", path.display())))?;
        let m = extractor
            .extract(&clip)
            .map_err(|e| ReportError::Contract(format!("{}: {e}", path.display())))?;
        store.clips.insert(entry.clip_id.clone(), m);
    }
    let target = match &cfg.dataset.features {
        Some(p) => {
            art.written.push(p.clone());
            p.clone()
        }
        None => art.path("features.adda"),
    };
    store.save(&target)?;
    Ok(format!(
        "extracted {} clips to {}\n",
        store.clips.len(),
        target.display()
    ))
}

struct Corpus {
    split: Split,
    store: FeatureStore,
}

impl Corpus {
    fn load(cfg: &RunConfig) -> Result<Self, ReportError> {
        let manifest = read_manifest(cfg.dataset.manifest.as_deref().expect("validated"))?;
        let store = FeatureStore::load(cfg.dataset.features.as_deref().expect("validated"))?;
        let plan = SplitPlan::for_manifest(&manifest, seed::derive(cfg.seed, "split"));
        Ok(Corpus {
            split: split_dataset(&manifest, &plan)?,
            store,
        })
    }

    fn examples(
        &self,
        entries: &[ManifestEntry],
        keep: impl Fn(&ManifestEntry) -> bool,
    ) -> Result<Vec<Example>, ReportError> {
        entries
            .iter()
            .filter(|e| keep(e))
            .map(|e| {
                let m = self.store.clips.get(&e.clip_id).ok_or_else(|| {
                    ReportError::Contract(format!(
                        "clip `{}` is missing from the feature store",
                        e.clip_id
                    ))
                })?;
                Ok(Example::from_matrix(
                    m,
                    e.label()?,
                    e.device,
                    e.clip_id.clone(),
                ))
            })
            .collect()
    }

    fn source(
        &self,
        cfg: &RunConfig,
        entries: &[ManifestEntry],
    ) -> Result<DomainDataset, ReportError> {
        let ex = self.examples(entries, |e| e.device == cfg.dataset.source_device)?;
        Ok(DomainDataset::new(DomainRole::Source, class_names(), ex)?)
    }

    fn target(
        &self,
        entries: &[ManifestEntry],
        keep: impl Fn(&ManifestEntry) -> bool,
    ) -> Result<DomainDataset, ReportError> {
        Ok(DomainDataset::sealed_target(
            class_names(),
            self.examples(entries, keep)?,
        )?)
    }
}

fn class_names() -> Vec<String> {
    SCENES.iter().map(|s| s.to_string()).collect()
}

fn example_shape(ds: &DomainDataset) -> Result<Vec<usize>, ReportError> {
    ds.feature_shape()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| ReportError::Contract("the source training split is empty".into()))
}

fn run_pretrain<T: Real>(cfg: &RunConfig, art: &mut Artifacts) -> Result<String, ReportError> {
    let corpus = Corpus::load(cfg)?;
    let train = corpus.source(cfg, &corpus.split.train)?;
    let validation = corpus.source(cfg, &corpus.split.validation)?;
    let arch = architecture(cfg, example_shape(&train)?)?;
    let (m, c) = build_source_models::<T>(cfg, &arch)?;
    let val = (!validation.is_empty()).then_some(&validation);
    let out = keep_trace(
        art,
        "pretrain_trace.csv",
        pretrain(m, c, &train, val, &cfg.pretrain),
    )?;
    art.trace("pretrain_trace.csv", &out.trace)?;
    art.json("pretrain_epochs.json", &out.epochs)?;
    let p = art.path("pretrained.adda");
    save_checkpoint(
        &p,
        &[&out.mapper, &out.classifier],
        &provenance(cfg, "pretrain"),
    )?;
    let last = out.epochs.last();
    Ok(format!(
        "pretrained on {} clips for {} epochs; final loss {}, validation accuracy {}\n",
        train.len(),
        out.epochs.len(),
        last.map_or("-".into(), |e| format!("{:.4}", e.loss)),
        last.and_then(|e| e.validation_accuracy)
            .map_or("-".into(), |a| format!("{:.2}%", 100.0 * a)),
    ))
}

fn run_adapt<T: Real>(cfg: &RunConfig, art: &mut Artifacts) -> Result<String, ReportError> {
    let corpus = Corpus::load(cfg)?;
    let source = corpus.source(cfg, &corpus.split.train)?;
    let arch = architecture(cfg, example_shape(&source)?)?;
    let ckpt = load_checkpoint(cfg.checkpoints.pretrained.as_deref().expect("validated"))?;
    let m_s: Model<T> = ckpt.model(SOURCE_MAPPER, Some(&arch.mapper))?;
    let c: Model<T> = ckpt.model(CLASSIFIER, Some(&arch.classifier))?;
    let targets = cfg
        .dataset
        .target_devices
        .iter()
        .map(|&d| corpus.target(&corpus.split.train, |e| e.device == d))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&DomainDataset> = targets.iter().collect();
    let out = keep_trace(
        art,
        "adapt_trace.csv",
        adapt(&m_s, &c, &arch.discriminator, &source, &refs, &cfg.adapt),
    )?;
    art.trace("adapt_trace.csv", &out.trace)?;
    art.json("adapt_epochs.json", &out.epochs)?;
    let p = art.path("adapted.adda");
    save_checkpoint(
        &p,
        &[&out.target, &out.classifier, &out.discriminator],
        &provenance(cfg, "adapt"),
    )?;
    Ok(format!(
        "adapted for {} epochs ({} iterations, {} discriminator updates)\n",
        out.epochs.len(),
        out.iterations,
        out.discriminator_updates
    ))
}

fn run_evaluate<T: Real>(cfg: &RunConfig, art: &mut Artifacts) -> Result<String, ReportError> {
    let corpus = Corpus::load(cfg)?;
    let source = corpus.source(cfg, &corpus.split.test)?;
    let target = corpus.target(&corpus.split.test, |e| {
        cfg.dataset.target_devices.contains(&e.device)
    })?;
    let domains = [("source", &source), ("target", &target)];
    let shape = match source.feature_shape().or(target.feature_shape()) {
        Some(s) => s.to_vec(),
        None => {
            return Err(ReportError::Contract(
                "cannot evaluate on an empty dataset".into(),
            ))
        }
    };
    let arch = architecture(cfg, shape)?;
    let mut reports = Vec::new();
    for (identity, path, mapper) in [
        (
            ModelIdentity::NonAdapted,
            &cfg.checkpoints.pretrained,
            SOURCE_MAPPER,
        ),
        (
            ModelIdentity::Adapted,
            &cfg.checkpoints.adapted,
            TARGET_MAPPER,
        ),
    ] {
        let Some(path) = path else { continue };
        let ckpt = load_checkpoint(path)?;
        let m: Model<T> = ckpt.model(mapper, Some(&arch.mapper))?;
        let c: Model<T> = ckpt.model(CLASSIFIER, Some(&arch.classifier))?;
        reports.push(domain_report(cfg, identity, &m, &c, &domains)?);
    }
    if let [before, after] = &reports[..] {
        let comparison = ComparisonReport {
            seed: cfg.seed,
            config_digest: cfg.digest(),
            table: AccuracyTable::from_reports(before, after),
            non_adapted: before.clone(),
            adapted: after.clone(),
        };
        write_comparison(art, &comparison)?;
        return Ok(comparison.table.render());
    }
    let report = &reports[0];
    art.json("report.json", report)?;
    let mut text = String::new();
    for (domain, eval) in &report.domains {
        art.confusion(
            &format!("confusion_{}_{domain}.csv", report.model.as_str()),
            eval,
        )?;
        text.push_str(&format!(
            "{domain}: {:.2}% of {} clips\n{}",
            100.0 * eval.accuracy,
            eval.n_examples,
            eval.confusion.render()
        ));
    }
    Ok(text)
}
