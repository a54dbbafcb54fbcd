//! One-vs-rest confusion counts and the per-label report: balanced accuracy,
//! precision, recall, F1 and support, plus macro averages.

use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ActivityLabel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction shape {probs:?} does not match truth shape {truth:?}")]
    DimensionMismatch { probs: (usize, usize), truth: (usize, usize) },
    #[error("{label}: {rate} is undefined (zero denominator)")]
    UndefinedRate { label: ActivityLabel, rate: &'static str },
    #[error("cannot average an empty report")]
    Empty,
    #[error("truth row {0} is not one-hot")]
    NotOneHot(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Binary confusion counts of one label against the rest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelConfusion {
    /// Indexed by class (label id − 1).
    pub per_label: Vec<LabelCounts>,
    pub n_samples: usize,
    /// Number of rows whose predicted class equals the true class.
    pub n_correct: usize,
}

impl MultiLabelConfusion {
    /// Counts from predicted and true class indices.
    pub fn from_classes(predicted: &[usize], truth: &[usize], n_classes: usize) -> Self {
        assert_eq!(predicted.len(), truth.len());
        let mut per_label = vec![LabelCounts::default(); n_classes];
        let mut n_correct = 0;
        for (&p, &t) in predicted.iter().zip(truth) {
            if p == t {
                n_correct += 1;
            }
            for (k, c) in per_label.iter_mut().enumerate() {
                match (p == k, t == k) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
        }
        Self { per_label, n_samples: truth.len(), n_correct }
    }

    pub fn n_classes(&self) -> usize {
        self.per_label.len()
    }
}

fn truth_classes(truth: ArrayView2<f64>) -> Result<Vec<usize>> {
    truth
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let hot: Vec<usize> = r.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(k, _)| k).collect();
            match hot[..] {
                [k] if r.sum() == 1.0 => Ok(k),
                _ => Err(MetricsError::NotOneHot(i)),
            }
        })
        .collect()
}

/// Argmax class assignment against one-hot truth.
pub fn confusion_from_predictions(probs: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<MultiLabelConfusion> {
    if probs.dim() != truth.dim() {
        return Err(MetricsError::DimensionMismatch { probs: probs.dim(), truth: truth.dim() });
    }
    let predicted: Vec<usize> = probs.rows().into_iter().map(argmax).collect();
    Ok(MultiLabelConfusion::from_classes(&predicted, &truth_classes(truth)?, probs.ncols()))
}

/// Independent per-label decisions: label `k` is predicted when its
/// probability reaches `thresholds[k]`.
pub fn thresholded_confusion(
    probs: ArrayView2<f64>,
    truth: ArrayView2<f64>,
    thresholds: &[f64],
) -> Result<MultiLabelConfusion> {
    if probs.dim() != truth.dim() || thresholds.len() != probs.ncols() {
        return Err(MetricsError::DimensionMismatch { probs: probs.dim(), truth: truth.dim() });
    }
    let mut per_label = vec![LabelCounts::default(); probs.ncols()];
    let mut n_correct = 0;
    for (p, t) in probs.rows().into_iter().zip(truth.rows()) {
        let mut all_right = true;
        for (k, c) in per_label.iter_mut().enumerate() {
            let predicted = p[k] >= thresholds[k];
            let actual = t[k] == 1.0;
            all_right &= predicted == actual;
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        if all_right {
            n_correct += 1;
        }
    }
    Ok(MultiLabelConfusion { per_label, n_samples: probs.nrows(), n_correct })
}

/// `(TPR + TNR) / 2`; errors when either rate has a zero denominator.
pub fn balanced_accuracy(label: ActivityLabel, c: &LabelCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(MetricsError::UndefinedRate { label, rate: "true positive rate" });
    }
    if c.tn + c.fp == 0 {
        return Err(MetricsError::UndefinedRate { label, rate: "true negative rate" });
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((tpr + tnr) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when no row was predicted as this label, so precision was reported as 0.
    pub precision_undefined: bool,
}

/// Precision, recall, F1 and support. Recall needs positive support;
/// precision is 0 (and flagged) when nothing was predicted positive.
pub fn prf_support(label: ActivityLabel, c: &LabelCounts) -> Result<Prf> {
    if c.tp + c.fn_ == 0 {
        return Err(MetricsError::UndefinedRate { label, rate: "recall" });
    }
    let precision_undefined = c.tp + c.fp == 0;
    let precision = if precision_undefined { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf { precision, recall, f1, support: c.support(), precision_undefined })
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: ActivityLabel,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub precision_undefined: bool,
    pub counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    /// Mean one-vs-rest balanced accuracy; the single-number score used in summaries.
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Plain fraction of rows whose predicted class is the true class.
    pub accuracy: f64,
    /// Multiclass variant: mean per-class recall.
    pub recall_mean_balanced_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub n_samples: usize,
    pub per_label: Vec<LabelMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

pub const CSV_HEADER: &str = "run_id,config_hash,label,balanced_accuracy,precision,recall,f1,support,tp,fp,fn,tn";

impl MetricsReport {
    pub fn from_confusion(c: &MultiLabelConfusion, provenance: Provenance) -> Result<Self> {
        let per_label = c
            .per_label
            .iter()
            .enumerate()
            .map(|(k, counts)| {
                let label = ActivityLabel::from_index(k);
                let ba = balanced_accuracy(label, counts)?;
                let prf = prf_support(label, counts)?;
                Ok(LabelMetrics {
                    label,
                    balanced_accuracy: ba,
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                    support: prf.support,
                    precision_undefined: prf.precision_undefined,
                    counts: *counts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&LabelMetrics) -> f64| macro_average(&per_label.iter().map(f).collect::<Vec<_>>());
        let macro_avg = MacroMetrics {
            balanced_accuracy: col(|m| m.balanced_accuracy)?,
            precision: col(|m| m.precision)?,
            recall: col(|m| m.recall)?,
            f1: col(|m| m.f1)?,
            accuracy: c.n_correct as f64 / c.n_samples.max(1) as f64,
            recall_mean_balanced_accuracy: col(|m| m.recall)?,
        };
        Ok(Self { provenance, n_samples: c.n_samples, per_label, macro_avg })
    }

    /// Scores probability rows against one-hot truth.
    pub fn evaluate(probs: ArrayView2<f64>, truth: ArrayView2<f64>, provenance: Provenance) -> Result<Self> {
        Self::from_confusion(&confusion_from_predictions(probs, truth)?, provenance)
    }

    pub fn label(&self, label: ActivityLabel) -> &LabelMetrics {
        &self.per_label[label.index()]
    }

    /// One row per label, without a header (see [`CSV_HEADER`]).
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for m in &self.per_label {
            let c = m.counts;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.provenance.run_id,
                self.provenance.config_hash,
                m.label.tag(),
                m.balanced_accuracy,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                c.tp,
                c.fp,
                c.fn_,
                c.tn
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
