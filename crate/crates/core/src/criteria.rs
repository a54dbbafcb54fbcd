//! Pass/fail checks of measured results against the reference values in
//! [`crate::golden`]. Each check explains every comparison it made.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{label_distribution, ActivityLabel, SensorGroup, SubjectRecording};
use crate::fedstack::{FederationOutcome, LocalReport, LooRow, StackingKind};
use crate::golden;
use crate::metrics::MetricsReport;
use crate::neural::Architecture;
use crate::pipeline::PreparedSubject;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    /// The inputs needed to run the check are missing.
    Blocked,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Blocked => "BLOCKED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub notes: Vec<String>,
}

impl Verdict {
    pub fn blocked(reason: impl Into<String>) -> Self {
        Self { status: Status::Blocked, notes: vec![reason.into()] }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Collects comparisons; any failed one fails the verdict.
#[derive(Default)]
struct Ledger {
    failed: bool,
    notes: Vec<String>,
}

impl Ledger {
    fn check(&mut self, ok: bool, note: String) {
        if !ok {
            self.failed = true;
        }
        self.notes.push(format!("{} {note}", if ok { "ok  " } else { "FAIL" }));
    }

    fn finish(self) -> Verdict {
        Verdict { status: if self.failed { Status::Fail } else { Status::Pass }, notes: self.notes }
    }
}

/// Exact per-label counts for every reference subject.
pub fn label_counts(recs: &[SubjectRecording]) -> Verdict {
    let mut l = Ledger::default();
    for subject in 1..=golden::LABEL_COUNTS.len() as u32 {
        let want = golden::label_counts(subject).expect("subject in table");
        let Some(rec) = recs.iter().find(|r| r.subject_id == subject) else {
            l.check(false, format!("subject {subject} not loaded"));
            continue;
        };
        let dist = label_distribution(rec);
        let got: Vec<usize> = ActivityLabel::all().map(|a| dist.count(a)).collect();
        let diffs: Vec<String> = ActivityLabel::all()
            .zip(got.iter().zip(want))
            .filter(|(_, (g, w))| g != w)
            .map(|(a, (g, w))| format!("{a} {g} != {w}"))
            .collect();
        l.check(
            diffs.is_empty(),
            format!("subject {subject}: {}", if diffs.is_empty() { "exact".into() } else { diffs.join(", ") }),
        );
    }
    l.finish()
}

/// Cumulative explained variance at the reference component count and the
/// count picked by the default threshold, for subject 1.
pub fn pca_golden(subject1: &PreparedSubject) -> Verdict {
    let mut l = Ledger::default();
    let pca = &subject1.pipeline.features.pca;
    let cumulative = pca.cumulative_ratio();
    let k = golden::PCA_SELECTED;
    let (lo, hi) = golden::PCA_CUMULATIVE_BAND;
    match cumulative.get(k - 1) {
        Some(&c) => l.check((lo..=hi).contains(&c), format!("cumulative ratio at PC{k} = {c:.4} in [{lo}, {hi}]")),
        None => l.check(false, format!("only {} components", cumulative.len())),
    }
    l.check(pca.n_selected == k, format!("selected components = {} (want {k})", pca.n_selected));
    l.finish()
}

fn local_ba(local: &[LocalReport], client: u32, arch: Architecture) -> Option<f64> {
    local.iter().find(|r| r.client_id == client && r.architecture == arch).map(|r| r.report.macro_avg.balanced_accuracy)
}

/// CNN per-client balanced accuracy near the reference and above the Bi-LSTM.
pub fn local_models(local: &[LocalReport]) -> Verdict {
    let mut l = Ledger::default();
    let mut wins = 0;
    for client in 1..=golden::LOCAL_BALANCED_ACCURACY.len() as u32 {
        let want = golden::local_reference(client, Architecture::Cnn1d).expect("client in table");
        let (Some(cnn), Some(lstm)) =
            (local_ba(local, client, Architecture::Cnn1d), local_ba(local, client, Architecture::BiLstm))
        else {
            l.check(false, format!("client {client}: missing cnn1d or bilstm report"));
            continue;
        };
        l.check(
            (cnn - want).abs() <= golden::LOCAL_TOLERANCE,
            format!("client {client}: cnn1d {cnn:.4} vs {want} (±{})", golden::LOCAL_TOLERANCE),
        );
        if cnn > lstm {
            wins += 1;
        }
    }
    l.check(
        wins >= golden::CNN_OVER_BILSTM_MIN,
        format!("cnn1d beats bilstm on {wins} clients (need {})", golden::CNN_OVER_BILSTM_MIN),
    );
    l.finish()
}

/// Heterogeneous stacking at least as good as homogeneous (with slack) for
/// each reference architecture, and a strong heterogeneous CNN.
pub fn stacking_order(outcome: &FederationOutcome) -> Verdict {
    let mut l = Ledger::default();
    for arch in golden::COLUMNS {
        let ba = |kind| outcome.global(kind, arch).map(|g| g.report.macro_avg.balanced_accuracy);
        match (ba(StackingKind::Homogeneous), ba(StackingKind::Heterogeneous)) {
            (Some(homo), Some(hetero)) => l.check(
                hetero >= homo - golden::STACKING_SLACK,
                format!("{arch}: heterogeneous {hetero:.4} >= homogeneous {homo:.4} - {}", golden::STACKING_SLACK),
            ),
            _ => l.check(false, format!("{arch}: missing global result")),
        }
    }
    let cnn =
        outcome.global(StackingKind::Heterogeneous, Architecture::Cnn1d).map(|g| g.report.macro_avg.balanced_accuracy);
    l.check(
        cnn.is_some_and(|v| v >= golden::HETEROGENEOUS_CNN_FLOOR),
        format!(
            "heterogeneous cnn1d {} >= {}",
            cnn.map_or("missing".into(), |v| format!("{v:.4}")),
            golden::HETEROGENEOUS_CNN_FLOOR
        ),
    );
    l.finish()
}

/// Shape of the leave-one-out curve of the CNN global.
pub fn leave_one_out_shape(rows: &[LooRow]) -> Verdict {
    let mut l = Ledger::default();
    let cnn: BTreeMap<u32, (f64, f64)> = rows
        .iter()
        .filter(|r| r.architecture == Architecture::Cnn1d)
        .map(|r| (r.held_out, (r.homogeneous.macro_avg.balanced_accuracy, r.heterogeneous.macro_avg.balanced_accuracy)))
        .collect();
    let mut ordered = 0;
    for &(subject, homo_ref, hetero_ref) in &golden::LEAVE_ONE_OUT {
        let Some(&(homo, hetero)) = cnn.get(&subject) else {
            l.check(false, format!("hold-out {subject}: missing"));
            continue;
        };
        let tol = golden::LEAVE_ONE_OUT_TOLERANCE;
        l.check(
            (homo - homo_ref).abs() <= tol && (hetero - hetero_ref).abs() <= tol,
            format!("hold-out {subject}: homogeneous {homo:.4} vs {homo_ref}, heterogeneous {hetero:.4} vs {hetero_ref} (±{tol})"),
        );
        if hetero >= homo {
            ordered += 1;
        }
    }
    l.check(
        ordered >= golden::LEAVE_ONE_OUT_ORDER_MIN,
        format!("heterogeneous >= homogeneous at {ordered} points (need {})", golden::LEAVE_ONE_OUT_ORDER_MIN),
    );
    let argmin =
        |pick: fn(&(f64, f64)) -> f64| cnn.iter().min_by(|a, b| pick(a.1).total_cmp(&pick(b.1))).map(|(&s, _)| s);
    for (name, at) in [("homogeneous", argmin(|p| p.0)), ("heterogeneous", argmin(|p| p.1))] {
        l.check(
            at == Some(golden::LEAVE_ONE_OUT_MINIMUM),
            format!("{name} minimum at hold-out {at:?} (want {})", golden::LEAVE_ONE_OUT_MINIMUM),
        );
    }
    l.finish()
}

/// Wrist ≥ ankle ≥ chest on macro balanced accuracy, chest running weak.
pub fn sensor_order(reports: &BTreeMap<SensorGroup, MetricsReport>) -> Verdict {
    let mut l = Ledger::default();
    let macro_ba = |g: SensorGroup| reports.get(&g).map(|r| r.macro_avg.balanced_accuracy);
    let (Some(chest), Some(ankle), Some(wrist)) =
        (macro_ba(SensorGroup::Chest), macro_ba(SensorGroup::LeftAnkle), macro_ba(SensorGroup::RightWrist))
    else {
        l.check(false, "missing sensor report".into());
        return l.finish();
    };
    l.check(
        wrist >= ankle && ankle >= chest,
        format!("right wrist {wrist:.4} >= left ankle {ankle:.4} >= chest {chest:.4}"),
    );
    for (group, got) in [(SensorGroup::Chest, chest), (SensorGroup::LeftAnkle, ankle), (SensorGroup::RightWrist, wrist)]
    {
        let reference = golden::sensor_reference(group);
        let want = reference.iter().sum::<f64>() / reference.len() as f64;
        l.check(
            (got - want).abs() <= golden::SENSOR_TOLERANCE,
            format!("{group} macro {got:.4} vs {want:.4} (±{})", golden::SENSOR_TOLERANCE),
        );
    }
    let running = ActivityLabel::new(10).expect("valid id");
    let chest_running = reports[&SensorGroup::Chest].label(running).balanced_accuracy;
    let want = golden::CHEST_BALANCED_ACCURACY[running.index()];
    l.check(
        chest_running < golden::CHEST_RUNNING_CEILING && (chest_running - want).abs() <= golden::SENSOR_TOLERANCE,
        format!(
            "chest {running} {chest_running:.4} < {} and within ±{} of {want}",
            golden::CHEST_RUNNING_CEILING,
            golden::SENSOR_TOLERANCE
        ),
    );
    l.finish()
}
