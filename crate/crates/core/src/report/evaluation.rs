use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::adapt::predict;
use crate::data::DomainDataset;
use crate::nn::Model;
use crate::real::Real;

/// Counts indexed `[reference][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_pairs(class_names: Vec<String>, reference: &[usize], predicted: &[usize]) -> Self {
        let mut cm = ConfusionMatrix::new(class_names);
        for (&r, &p) in reference.iter().zip(predicted) {
            cm.counts[r][p] += 1;
        }
        cm
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.correct() as f64 / total as f64)
    }

    /// Header row of class names, then one row per reference class.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["reference".to_string()];
        header.extend(self.class_names.iter().cloned());
        out.write_record(&header)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Aligned text grid of the row-normalized matrix.
    pub fn render(&self) -> String {
        let norm = normalize_confusion(self);
        let label_w = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(9);
        let mut s = format!("{:label_w$}", "reference");
        for i in 0..self.n_classes() {
            let _ = write!(s, " {:>6}", format!("p{i}"));
        }
        s.push('\n');
        for (i, row) in norm.rows.iter().enumerate() {
            let _ = write!(s, "{:label_w$}", self.class_names[i]);
            for v in row {
                let _ = write!(s, " {v:>6.3}");
            }
            if norm.empty_rows.contains(&i) {
                s.push_str("  (no examples)");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub rows: Vec<Vec<f64>>,
    /// Reference classes without examples; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

/// Divides each nonempty row by its sum.
pub fn normalize_confusion(cm: &ConfusionMatrix) -> NormalizedConfusion {
    let mut empty_rows = Vec::new();
    let rows = cm
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                empty_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / sum as f64).collect()
            }
        })
        .collect();
    NormalizedConfusion { rows, empty_rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAccuracy {
    pub n_examples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEvaluation {
    pub n_examples: usize,
    pub accuracy: f64,
    pub per_device: BTreeMap<String, DeviceAccuracy>,
    pub confusion: ConfusionMatrix,
    pub normalized: NormalizedConfusion,
}

/// Accuracy and confusion of `classifier ∘ mapper` on `dataset`, against
/// its evaluation labels (the sealed channel for target sets).
pub fn evaluate<T: Real>(
    mapper: &Model<T>,
    classifier: &Model<T>,
    dataset: &DomainDataset,
) -> Result<DomainEvaluation, ReportError> {
    if dataset.is_empty() {
        return Err(ReportError::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let labels = dataset.evaluation_labels().ok_or_else(|| {
        ReportError::Contract("dataset has unlabeled examples and no evaluation labels".into())
    })?;
    let predicted = predict(mapper, classifier, dataset)?;
    Ok(evaluation_from_predictions(dataset, &labels, &predicted))
}

pub(crate) fn evaluation_from_predictions(
    dataset: &DomainDataset,
    labels: &[usize],
    predicted: &[usize],
) -> DomainEvaluation {
    let confusion = ConfusionMatrix::from_pairs(dataset.class_names.clone(), labels, predicted);
    let mut per_device: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((ex, l), p) in dataset.examples().iter().zip(labels).zip(predicted) {
        let e = per_device.entry(ex.device.to_string()).or_default();
        e.0 += 1;
        e.1 += usize::from(l == p);
    }
    DomainEvaluation {
        n_examples: labels.len(),
        accuracy: confusion.accuracy().unwrap_or(0.0),
        per_device: per_device
            .into_iter()
            .map(|(d, (n, c))| {
                (
                    d,
                    DeviceAccuracy {
                        n_examples: n,
                        accuracy: c as f64 / n as f64,
                    },
                )
            })
            .collect(),
        normalized: normalize_confusion(&confusion),
        confusion,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelIdentity {
    NonAdapted,
    Adapted,
}

impl ModelIdentity {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelIdentity::NonAdapted => "non_adapted",
            ModelIdentity::Adapted => "adapted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: ModelIdentity,
    pub seed: u64,
    pub config_digest: String,
    /// Keyed `source` / `target`.
    pub domains: BTreeMap<String, DomainEvaluation>,
}

/// Source and target accuracy of both models, in percent-free fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub non_adapted: BTreeMap<String, f64>,
    pub adapted: BTreeMap<String, f64>,
}

impl AccuracyTable {
    pub fn from_reports(non_adapted: &EvaluationReport, adapted: &EvaluationReport) -> Self {
        let row = |r: &EvaluationReport| {
            r.domains
                .iter()
                .map(|(k, v)| (k.clone(), v.accuracy))
                .collect()
        };
        AccuracyTable {
            non_adapted: row(non_adapted),
            adapted: row(adapted),
        }
    }

    pub fn get(&self, model: ModelIdentity, domain: &str) -> Option<f64> {
        match model {
            ModelIdentity::NonAdapted => self.non_adapted.get(domain).copied(),
            ModelIdentity::Adapted => self.adapted.get(domain).copied(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<8} {:>12} {:>12}\n", "", "non-adapted", "adapted");
        let domains: Vec<&String> = self.non_adapted.keys().chain(self.adapted.keys()).collect();
        let mut seen = Vec::new();
        for d in domains {
            if seen.contains(&d) {
                continue;
            }
            seen.push(d);
            let cell =
                |v: Option<&f64>| v.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a));
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>12}",
                d,
                cell(self.non_adapted.get(d)),
                cell(self.adapted.get(d))
            );
        }
        s
    }
}

/// The side-by-side comparison written by the synthetic pipeline and by
/// `evaluate` when both checkpoints are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub config_digest: String,
    pub table: AccuracyTable,
    pub non_adapted: EvaluationReport,
    pub adapted: EvaluationReport,
}
