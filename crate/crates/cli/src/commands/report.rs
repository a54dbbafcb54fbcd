use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use fedstack::dataset::ActivityLabel;
use fedstack::fedstack::StackingKind;
use fedstack::golden;
use fedstack::neural::Architecture;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ablate, federate, train, AcceptanceFailed};
use crate::config::RunConfig;
use crate::output::{cell, read_stamped, Outputs, Stamp, Table};
use crate::results::{
    FederateSummary, LocalRow, SensorResult, SubjectSummary, FEDERATE_SUMMARY, INGEST_SUMMARY, LOCAL_SUMMARY,
    SENSOR_SUMMARY,
};
use crate::svg::LineChart;

pub const COMMAND: &str = "report";

/// One measured value next to its reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub section: &'static str,
    pub key: String,
    pub architecture: Option<Architecture>,
    pub measured: f64,
    pub reference: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Comparison {
    fn new(
        section: &'static str,
        key: String,
        arch: Option<Architecture>,
        measured: f64,
        reference: f64,
        tol: f64,
    ) -> Self {
        let delta = measured - reference;
        Self { section, key, architecture: arch, measured, reference, delta, tolerance: tol, pass: delta.abs() <= tol }
    }
}

/// Earlier run summaries found under the output directory.
#[derive(Debug, Default)]
pub struct Runs {
    pub ingest: Option<Vec<SubjectSummary>>,
    pub local: Option<Vec<LocalRow>>,
    pub federate: Option<FederateSummary>,
    pub sensors: Option<Vec<SensorResult>>,
}

fn read_if_present<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.is_file() {
        read_stamped(path).map(Some)
    } else {
        Ok(None)
    }
}

impl Runs {
    pub fn load(out_dir: &Path) -> Result<Self> {
        Ok(Self {
            ingest: read_if_present(&out_dir.join("ingest").join(INGEST_SUMMARY))?,
            local: read_if_present(&out_dir.join(train::COMMAND).join(LOCAL_SUMMARY))?,
            federate: read_if_present(&out_dir.join(federate::COMMAND).join(FEDERATE_SUMMARY))?,
            sensors: read_if_present(&out_dir.join(ablate::COMMAND).join(SENSOR_SUMMARY))?,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.ingest.is_none() && self.local.is_none() && self.federate.is_none() && self.sensors.is_none()
    }

    /// Local rows of the federation when there is one, else of `train-local`.
    fn local_rows(&self) -> Option<&[LocalRow]> {
        self.federate.as_ref().map(|f| f.local.as_slice()).or(self.local.as_deref())
    }
}

/// Every comparison the available runs allow. `tolerance` overrides the
/// per-section defaults; label counts are always compared exactly.
pub fn compare(runs: &Runs, tolerance: Option<f64>) -> Vec<Comparison> {
    let tol = |default: f64| tolerance.unwrap_or(default);
    let mut out = Vec::new();
    for s in runs.ingest.iter().flatten() {
        if let Some(reference) = golden::label_counts(s.subject) {
            for (label, (&m, &r)) in ActivityLabel::all().zip(s.label_counts.iter().zip(reference)) {
                let key = format!("subject-{} {label}", s.subject);
                out.push(Comparison::new("label-counts", key, None, m as f64, r as f64, 0.0));
            }
        }
        if s.subject == 1 {
            let (lo, hi) = golden::PCA_CUMULATIVE_BAND;
            let k = golden::PCA_SELECTED;
            if let Some(&m) = s.pca_cumulative.get(k - 1) {
                let key = format!("subject-1 cumulative variance at {k}");
                out.push(Comparison::new("pca", key, None, m, (lo + hi) / 2.0, tol((hi - lo) / 2.0)));
            }
            let key = "subject-1 selected components".to_string();
            out.push(Comparison::new("pca", key, None, s.pca_selected as f64, k as f64, 0.0));
        }
    }
    for r in runs.local_rows().into_iter().flatten() {
        if let Some(reference) = golden::local_reference(r.client, r.architecture) {
            let key = format!("client-{}", r.client);
            let m = r.scores.balanced_accuracy;
            out.push(Comparison::new("local", key, Some(r.architecture), m, reference, tol(golden::LOCAL_TOLERANCE)));
        }
    }
    if let Some(f) = runs.federate.as_ref().filter(|f| f.held_out == golden::DEFAULT_HELD_OUT) {
        for g in &f.global {
            let het = g.stacking == StackingKind::Heterogeneous;
            if let Some(reference) = golden::global_reference(het, g.architecture) {
                let m = g.scores.balanced_accuracy;
                let t = tol(golden::GLOBAL_TOLERANCE);
                out.push(Comparison::new("global", g.stacking.tag().into(), Some(g.architecture), m, reference, t));
            }
        }
    }
    for p in runs.federate.iter().flat_map(|f| &f.loo).filter(|p| p.architecture == Architecture::Cnn1d) {
        if let Some(&(_, hom, het)) = golden::LEAVE_ONE_OUT.iter().find(|row| row.0 == p.held_out) {
            let t = tol(golden::LEAVE_ONE_OUT_TOLERANCE);
            for (kind, m, r) in [
                ("homogeneous", p.homogeneous.balanced_accuracy, hom),
                ("heterogeneous", p.heterogeneous.balanced_accuracy, het),
            ] {
                let key = format!("held-out {} {kind}", p.held_out);
                out.push(Comparison::new("leave-one-out", key, Some(p.architecture), m, r, t));
            }
        }
    }
    for s in runs.sensors.iter().flatten().filter(|s| s.architecture == Architecture::Cnn1d) {
        let reference = golden::sensor_reference(s.group);
        for (label, (&m, &r)) in ActivityLabel::all().zip(s.per_label.iter().zip(reference)) {
            let key = format!("{} {label}", s.group);
            out.push(Comparison::new("sensor", key, Some(s.architecture), m, r, tol(golden::SENSOR_TOLERANCE)));
        }
    }
    out
}

fn comparison_table(rows: &[Comparison]) -> Table {
    let mut t =
        Table::new(&["section", "key", "architecture", "measured", "reference", "delta", "tolerance", "status"]);
    for c in rows {
        t.row(vec![
            c.section.into(),
            c.key.clone(),
            c.architecture.map(cell).unwrap_or_default(),
            cell(c.measured),
            cell(c.reference),
            cell(c.delta),
            cell(c.tolerance),
            (if c.pass { "PASS" } else { "FAIL" }).into(),
        ]);
    }
    t
}

/// The local/global result grid: one row per client plus one per stacking
/// mode, with measured, reference and delta columns per architecture.
fn local_global_table(rows: &[Comparison]) -> Table {
    let mut header = vec!["row".to_string()];
    for a in golden::COLUMNS {
        header.extend([format!("measured_{a}"), format!("reference_{a}"), format!("delta_{a}")]);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&header);
    let mut keys: Vec<(&'static str, String)> = Vec::new();
    for c in rows.iter().filter(|c| c.section == "local" || c.section == "global") {
        if !keys.iter().any(|(s, k)| *s == c.section && *k == c.key) {
            keys.push((c.section, c.key.clone()));
        }
    }
    for (section, key) in keys {
        let mut cells = vec![key.clone()];
        for a in golden::COLUMNS {
            match rows.iter().find(|c| c.section == section && c.key == key && c.architecture == Some(a)) {
                Some(c) => cells.extend([cell(c.measured), cell(c.reference), cell(c.delta)]),
                None => cells.extend([String::new(), String::new(), String::new()]),
            }
        }
        t.row(cells);
    }
    t
}

fn local_chart(rows: &[Comparison]) -> Option<LineChart> {
    let mut clients: Vec<String> = rows.iter().filter(|c| c.section == "local").map(|c| c.key.clone()).collect();
    clients.dedup();
    if clients.is_empty() {
        return None;
    }
    let mut chart =
        LineChart::new("Local balanced accuracy against reference", "client", "balanced accuracy", clients.clone());
    for a in golden::COLUMNS {
        let pick = |f: fn(&Comparison) -> f64| -> Vec<f64> {
            clients
                .iter()
                .map(|k| {
                    rows.iter()
                        .find(|c| c.section == "local" && &c.key == k && c.architecture == Some(a))
                        .map_or(f64::NAN, f)
                })
                .collect()
        };
        chart.push(format!("measured {a}"), pick(|c| c.measured));
        chart.push(format!("reference {a}"), pick(|c| c.reference));
    }
    Some(chart)
}

fn markdown(rows: &[Comparison], stamp: &Stamp, verdict: &str) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# FedStack results against reference values\n");
    let _ = writeln!(md, "run `{}`, seed {}, config hash `{}`\n", stamp.run_id, stamp.seed, stamp.config_hash);
    let mut sections: Vec<&str> = rows.iter().map(|c| c.section).collect();
    sections.dedup();
    for section in sections {
        let mine: Vec<&Comparison> = rows.iter().filter(|c| c.section == section).collect();
        let passed = mine.iter().filter(|c| c.pass).count();
        let _ = writeln!(md, "## {section} ({passed}/{} within tolerance)\n", mine.len());
        let _ = writeln!(md, "| key | architecture | measured | reference | delta | tolerance | status |");
        let _ = writeln!(md, "|---|---|---:|---:|---:|---:|---|");
        for c in mine {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {:.4} | {:+.4} | {} | {} |",
                c.key,
                c.architecture.map(cell).unwrap_or_default(),
                c.measured,
                c.reference,
                c.delta,
                c.tolerance,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        md.push('\n');
    }
    let _ = writeln!(md, "{verdict}");
    md
}

pub fn run(cfg: &RunConfig, strict: bool) -> Result<()> {
    let runs = Runs::load(&cfg.out_dir)?;
    if runs.is_empty() {
        bail!("no runs under {}: run ingest, train-local, federate or ablate-sensor first", cfg.out_dir.display());
    }
    let mut out = Outputs::create(&cfg.out_dir, Stamp::new(COMMAND, cfg))?;
    let rows = compare(&runs, cfg.tolerance);
    let passed = rows.iter().filter(|c| c.pass).count();
    let ok = passed == rows.len();
    let verdict =
        format!("report: {} ({passed}/{} comparisons within tolerance)", if ok { "PASS" } else { "FAIL" }, rows.len());
    out.write_table("comparison.csv", &comparison_table(&rows))?;
    let grid = local_global_table(&rows);
    if !grid.is_empty() {
        out.write_table("local_global.csv", &grid)?;
    }
    if let Some(chart) = local_chart(&rows) {
        out.write_chart("local", &chart)?;
    }
    let md = markdown(&rows, &out.stamp, &verdict);
    out.write("report.md", md)?;
    out.write_json("comparison.json", &rows)?;
    let manifest = out.finish(cfg, if ok { "ok" } else { "out-of-tolerance" })?;
    println!("{verdict}");
    println!("report: manifest {}", manifest.display());
    if strict && !ok {
        return Err(AcceptanceFailed(verdict).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::{GlobalRow, Scores};
    use fedstack::dataset::SensorGroup;

    fn scores(ba: f64) -> Scores {
        Scores { balanced_accuracy: ba, accuracy: ba, recall_mean_balanced_accuracy: ba }
    }

    fn reference_runs() -> Runs {
        let local = (1..=9)
            .flat_map(|client| {
                golden::COLUMNS.into_iter().map(move |a| LocalRow {
                    client,
                    architecture: a,
                    n_train: 1,
                    n_test: 1,
                    input_dim: 16,
                    final_loss: 0.1,
                    scores: scores(golden::local_reference(client, a).unwrap()),
                })
            })
            .collect();
        let global = StackingKind::BOTH
            .into_iter()
            .flat_map(|k| {
                golden::COLUMNS.into_iter().map(move |a| GlobalRow {
                    stacking: k,
                    architecture: a,
                    base_models: 27,
                    stacked_rows: 1,
                    scored_rows: 1,
                    scores: scores(golden::global_reference(k == StackingKind::Heterogeneous, a).unwrap()),
                    per_label: vec![],
                })
            })
            .collect();
        let fed = FederateSummary {
            held_out: 10,
            participants: (1..=9).collect(),
            excluded: vec![],
            local,
            global,
            audit_passed: true,
            loo: vec![],
        };
        let sensors = SensorGroup::ALL
            .into_iter()
            .map(|g| SensorResult {
                group: g,
                architecture: Architecture::Cnn1d,
                input_dim: 9,
                scores: scores(0.9),
                per_label: golden::sensor_reference(g).to_vec(),
                audit_passed: true,
            })
            .collect();
        Runs { federate: Some(fed), sensors: Some(sensors), ..Runs::default() }
    }

    #[test]
    fn reference_values_pass_and_grid_has_eleven_rows() {
        let runs = reference_runs();
        let rows = compare(&runs, None);
        assert!(rows.iter().all(|c| c.pass && c.delta == 0.0));
        assert_eq!(rows.iter().filter(|c| c.section == "local").count(), 27);
        assert_eq!(rows.iter().filter(|c| c.section == "global").count(), 6);
        assert_eq!(rows.iter().filter(|c| c.section == "sensor").count(), 36);
        assert_eq!(local_global_table(&rows).len(), 11);
    }

    #[test]
    fn tolerance_decides_status() {
        let mut runs = reference_runs();
        let f = runs.federate.as_mut().unwrap();
        f.local[0].scores.balanced_accuracy -= 0.06;
        let rows = compare(&runs, None);
        let bad: Vec<_> = rows.iter().filter(|c| !c.pass).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].key, "client-1");
        assert!((bad[0].delta + 0.06).abs() < 1e-12);
        assert!(compare(&runs, Some(0.07)).iter().all(|c| c.pass));
    }

    #[test]
    fn counts_compare_exactly_and_other_held_out_skips_globals() {
        let mut counts = golden::label_counts(1).unwrap().to_vec();
        counts[11] -= 1;
        let ingest = vec![SubjectSummary {
            subject: 1,
            rows: 0,
            labeled_rows: 0,
            label_counts: counts,
            pca_cumulative: golden::PCA_CUMULATIVE.to_vec(),
            pca_selected: 16,
        }];
        let mut runs = reference_runs();
        runs.federate.as_mut().unwrap().held_out = 3;
        runs.ingest = Some(ingest);
        let rows = compare(&runs, Some(1.0));
        let bad: Vec<_> = rows.iter().filter(|c| !c.pass).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].key, "subject-1 act-12");
        assert!(rows.iter().filter(|c| c.section == "pca").all(|c| c.pass));
        assert!(rows.iter().all(|c| c.section != "global"));
    }
}
