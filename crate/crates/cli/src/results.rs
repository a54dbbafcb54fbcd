//! Summary records written by the run commands and read back by `report`.

use fedstack::dataset::{ActivityLabel, SensorGroup};
use fedstack::fedstack::{LocalReport, LooRow, StackingKind};
use fedstack::metrics::MetricsReport;
use fedstack::neural::Architecture;
use serde::{Deserialize, Serialize};

use crate::output::{cell, Table};

pub const INGEST_SUMMARY: &str = "summary.json";
pub const LOCAL_SUMMARY: &str = "summary.json";
pub const FEDERATE_SUMMARY: &str = "summary.json";
pub const SENSOR_SUMMARY: &str = "summary.json";

/// Headline numbers of one scored model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Macro one-vs-rest balanced accuracy.
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub recall_mean_balanced_accuracy: f64,
}

impl Scores {
    pub fn of(r: &MetricsReport) -> Self {
        Self {
            balanced_accuracy: r.macro_avg.balanced_accuracy,
            accuracy: r.macro_avg.accuracy,
            recall_mean_balanced_accuracy: r.macro_avg.recall_mean_balanced_accuracy,
        }
    }

    pub const HEADER: [&'static str; 3] = ["balanced_accuracy", "accuracy", "recall_mean_balanced_accuracy"];

    pub fn cells(&self) -> [String; 3] {
        [cell(self.balanced_accuracy), cell(self.accuracy), cell(self.recall_mean_balanced_accuracy)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: u32,
    pub rows: usize,
    pub labeled_rows: usize,
    /// Rows per activity, in activity-id order.
    pub label_counts: Vec<usize>,
    /// Cumulative explained-variance ratio of the training split.
    pub pca_cumulative: Vec<f64>,
    pub pca_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRow {
    pub client: u32,
    pub architecture: Architecture,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub final_loss: f64,
    pub scores: Scores,
}

impl LocalRow {
    pub fn of(r: &LocalReport) -> Self {
        Self {
            client: r.client_id,
            architecture: r.architecture,
            n_train: r.n_train,
            n_test: r.n_test,
            input_dim: r.input_dim,
            final_loss: r.final_loss,
            scores: Scores::of(&r.report),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub stacking: StackingKind,
    pub architecture: Architecture,
    pub base_models: usize,
    pub stacked_rows: usize,
    pub scored_rows: usize,
    pub scores: Scores,
    /// Balanced accuracy per activity, in activity-id order.
    pub per_label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooPoint {
    pub held_out: u32,
    pub architecture: Architecture,
    pub homogeneous: Scores,
    pub heterogeneous: Scores,
    pub audit_passed: bool,
}

impl LooPoint {
    pub fn of(r: &LooRow) -> Self {
        Self {
            held_out: r.held_out,
            architecture: r.architecture,
            homogeneous: Scores::of(&r.homogeneous),
            heterogeneous: Scores::of(&r.heterogeneous),
            audit_passed: r.audit.passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederateSummary {
    pub held_out: u32,
    pub participants: Vec<u32>,
    pub excluded: Vec<u32>,
    pub local: Vec<LocalRow>,
    pub global: Vec<GlobalRow>,
    pub audit_passed: bool,
    #[serde(default)]
    pub loo: Vec<LooPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorResult {
    pub group: SensorGroup,
    pub architecture: Architecture,
    pub input_dim: usize,
    pub scores: Scores,
    pub per_label: Vec<f64>,
    pub audit_passed: bool,
}

pub fn per_label(r: &MetricsReport) -> Vec<f64> {
    r.per_label.iter().map(|m| m.balanced_accuracy).collect()
}

pub fn label_tags() -> Vec<String> {
    ActivityLabel::all().map(ActivityLabel::tag).collect()
}

/// The local rows as a table, one row per (client, architecture).
pub fn local_table(rows: &[LocalRow]) -> Table {
    let mut header = vec!["client", "architecture", "n_train", "n_test", "input_dim", "final_loss"];
    header.extend(Scores::HEADER);
    let mut t = Table::new(&header);
    for r in rows {
        let mut cells = vec![
            cell(r.client),
            cell(r.architecture),
            cell(r.n_train),
            cell(r.n_test),
            cell(r.input_dim),
            cell(r.final_loss),
        ];
        cells.extend(r.scores.cells());
        t.row(cells);
    }
    t
}
