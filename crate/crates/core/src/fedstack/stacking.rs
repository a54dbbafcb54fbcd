//! Prediction records, sample-axis stacking and the meta-learner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{FedError, Result};
use crate::dataset::{ActivityLabel, N_ACTIVITIES};
use crate::features::one_hot_encode;
use crate::metrics::{confusion_from_predictions, MetricsReport, MultiLabelConfusion, Provenance};
use crate::neural::{train, Architecture, LearnerSpec, TrainConfig, TrainedLearner};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// One base-model output as it leaves a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub client_id: u32,
    pub architecture: Architecture,
    /// Position of the row inside the client's test block; meaningless elsewhere.
    pub sample_ref: usize,
    pub probs: Vec<f64>,
    pub true_label: Option<ActivityLabel>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != N_ACTIVITIES {
            return Err(FedError::InvalidRecord(format!(
                "client {} sample {}: {} probabilities, expected {N_ACTIVITIES}",
                self.client_id,
                self.sample_ref,
                self.probs.len()
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL || self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(FedError::InvalidRecord(format!(
                "client {} sample {}: probabilities sum to {sum}",
                self.client_id, self.sample_ref
            )));
        }
        Ok(())
    }
}

/// Builds records from a probability matrix and optional labels.
pub fn records_from_probs(
    client_id: u32,
    architecture: Architecture,
    probs: ArrayView2<f64>,
    labels: Option<&[ActivityLabel]>,
) -> Vec<PredictionRecord> {
    probs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| PredictionRecord {
            client_id,
            architecture,
            sample_ref: i,
            probs: row.to_vec(),
            true_label: labels.map(|l| l[i]),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "architecture")]
pub enum StackingMode {
    Homogeneous(Architecture),
    Heterogeneous,
}

impl StackingMode {
    pub fn kind(self) -> StackingKind {
        match self {
            StackingMode::Homogeneous(_) => StackingKind::Homogeneous,
            StackingMode::Heterogeneous => StackingKind::Heterogeneous,
        }
    }
}

impl fmt::Display for StackingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StackingMode::Homogeneous(a) => write!(f, "homogeneous({a})"),
            StackingMode::Heterogeneous => f.write_str("heterogeneous"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingKind {
    Homogeneous,
    Heterogeneous,
}

impl StackingKind {
    pub const BOTH: [StackingKind; 2] = [StackingKind::Homogeneous, StackingKind::Heterogeneous];

    pub fn tag(self) -> &'static str {
        match self {
            StackingKind::Homogeneous => "homogeneous",
            StackingKind::Heterogeneous => "heterogeneous",
        }
    }
}

/// Meta-learner training rows: base probabilities in, one-hot truth out.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTrainingSet {
    pub mode: StackingMode,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// `(client, architecture)` of each row.
    pub provenance: Vec<(u32, Architecture)>,
}

impl StackedTrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn architectures(&self) -> BTreeSet<Architecture> {
        self.provenance.iter().map(|&(_, a)| a).collect()
    }

    pub fn clients(&self) -> BTreeSet<u32> {
        self.provenance.iter().map(|&(c, _)| c).collect()
    }
}

fn assemble(mode: StackingMode, mut rows: Vec<&PredictionRecord>) -> Result<StackedTrainingSet> {
    if rows.is_empty() {
        return Err(FedError::EmptyStack);
    }
    rows.sort_by_key(|r| (r.client_id, r.architecture, r.sample_ref));
    let mut inputs = Array2::zeros((rows.len(), N_ACTIVITIES));
    let mut labels = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        r.validate()?;
        let label = r.true_label.ok_or(FedError::MissingLabel { client: r.client_id, sample_ref: r.sample_ref })?;
        inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&r.probs));
        labels.push(label);
    }
    let targets = one_hot_encode(&labels).map_err(|e| FedError::InvalidRecord(e.to_string()))?.0;
    let provenance = rows.iter().map(|r| (r.client_id, r.architecture)).collect();
    Ok(StackedTrainingSet { mode, inputs, targets, provenance })
}

/// Sample-axis union of every client's `arch` predictions.
pub fn stack_homogeneous(records: &[PredictionRecord], arch: Architecture) -> Result<StackedTrainingSet> {
    let mut by_client: BTreeMap<u32, bool> = BTreeMap::new();
    for r in records {
        *by_client.entry(r.client_id).or_default() |= r.architecture == arch;
    }
    if let Some((&client, _)) = by_client.iter().find(|(_, &has)| !has) {
        return Err(FedError::MissingArchitecture { client, architecture: arch });
    }
    assemble(StackingMode::Homogeneous(arch), records.iter().filter(|r| r.architecture == arch).collect())
}

/// Sample-axis union over clients and the architectures in `archs`.
pub fn stack_heterogeneous(records: &[PredictionRecord], archs: &BTreeSet<Architecture>) -> Result<StackedTrainingSet> {
    let rows: Vec<&PredictionRecord> = records.iter().filter(|r| archs.contains(&r.architecture)).collect();
    let present: BTreeSet<Architecture> = rows.iter().map(|r| r.architecture).collect();
    if present.len() < 2 {
        return Err(FedError::InsufficientDiversity { found: present.len() });
    }
    assemble(StackingMode::Heterogeneous, rows)
}

/// Meta-learner over 12-wide probability inputs.
pub fn train_global(stacked: &StackedTrainingSet, arch: Architecture, cfg: &TrainConfig) -> Result<TrainedLearner> {
    if stacked.is_empty() {
        return Err(FedError::EmptyStack);
    }
    let spec = LearnerSpec::new(arch, N_ACTIVITIES);
    Ok(train(&spec, stacked.inputs.view(), stacked.targets.view(), cfg)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Score the meta-learner on every (base model, sample) pair.
    #[default]
    PerRow,
    /// Average the meta-learner's outputs over base models, then score per sample.
    EnsembleMean,
}

/// Base-model probabilities for the held-out rows, one matrix per model.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePredictions {
    pub client_id: u32,
    pub architecture: Architecture,
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnseenScore {
    pub report: MetricsReport,
    pub scored_rows: usize,
    pub confusion: MultiLabelConfusion,
}

/// Applies the meta-learner to base-model outputs on unseen rows and scores
/// the result against `truth`.
pub fn infer_unseen(
    global: &TrainedLearner,
    base: &[BasePredictions],
    truth: &[ActivityLabel],
    mode: InferenceMode,
    provenance: Provenance,
) -> Result<UnseenScore> {
    if base.is_empty() {
        return Err(FedError::EmptyStack);
    }
    let truth_t = one_hot_encode(truth).map_err(|e| FedError::InvalidRecord(e.to_string()))?.0;
    let mut outputs = Vec::with_capacity(base.len());
    for b in base {
        if b.probs.nrows() != truth.len() {
            return Err(FedError::InvalidRecord(format!(
                "client {} {}: {} predictions for {} rows",
                b.client_id,
                b.architecture,
                b.probs.nrows(),
                truth.len()
            )));
        }
        outputs.push(global.predict_proba(b.probs.view())?);
    }
    let (probs, targets) = match mode {
        InferenceMode::PerRow => {
            let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
            let tviews = vec![truth_t.view(); outputs.len()];
            (stacked, ndarray::concatenate(ndarray::Axis(0), &tviews).expect("equal widths"))
        }
        InferenceMode::EnsembleMean => {
            let mut mean = Array2::zeros(truth_t.dim());
            for o in &outputs {
                mean += o;
            }
            mean /= outputs.len() as f64;
            (mean, truth_t)
        }
    };
    let confusion = confusion_from_predictions(probs.view(), targets.view())?;
    let report = MetricsReport::from_confusion(&confusion, provenance)?;
    Ok(UnseenScore { report, scored_rows: probs.nrows(), confusion })
}
