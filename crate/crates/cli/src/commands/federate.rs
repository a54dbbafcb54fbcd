use anyhow::{Context, Result};
use fedstack::fedstack::{
    leave_one_out_run, privacy_audit, run_federation, ClientBehavior, ClientNode, CoordinatorDataset, FederationOutcome,
};
use fedstack::pipeline::{prepare_subject, PreparedSubject};
use log::info;

use super::train::load_cached;
use super::{load, parallel_map, run_subjects, AuditFailed};
use crate::config::RunConfig;
use crate::output::{cell, with_seed, Outputs, Stamp, Table};
use crate::results::{label_tags, per_label, FederateSummary, GlobalRow, LocalRow, LooPoint, Scores, FEDERATE_SUMMARY};
use crate::svg::LineChart;

pub const COMMAND: &str = "federate";

pub struct FederateOptions {
    pub loo: bool,
    /// Test hook: this client attaches its raw features to its train report.
    pub inject_leak_client: Option<u32>,
}

fn global_rows(outcome: &FederationOutcome) -> Vec<GlobalRow> {
    outcome
        .globals
        .iter()
        .map(|g| GlobalRow {
            stacking: g.mode.kind(),
            architecture: g.architecture,
            base_models: g.base_models,
            stacked_rows: g.stacked_rows,
            scored_rows: g.scored_rows,
            scores: Scores::of(&g.report),
            per_label: per_label(&g.report),
        })
        .collect()
}

/// Local and global scores side by side, one row per model.
fn summary_table(local: &[LocalRow], global: &[GlobalRow]) -> Table {
    let mut header = vec!["scope", "client", "architecture"];
    header.extend(Scores::HEADER);
    let mut t = Table::new(&header);
    for r in local {
        let mut cells = vec!["local".into(), cell(r.client), cell(r.architecture)];
        cells.extend(r.scores.cells());
        t.row(cells);
    }
    for g in global {
        let mut cells = vec![g.stacking.tag().to_string(), String::new(), cell(g.architecture)];
        cells.extend(g.scores.cells());
        t.row(cells);
    }
    t
}

fn loo_outputs(out: &mut Outputs, points: &[LooPoint]) -> Result<()> {
    let mut held: Vec<u32> = points.iter().map(|p| p.held_out).collect();
    held.dedup();
    let mut chart = LineChart::new(
        "Leave-one-out global balanced accuracy",
        "held-out subject",
        "balanced accuracy",
        held.iter().map(|h| h.to_string()).collect(),
    );
    let mut archs: Vec<_> = points.iter().map(|p| p.architecture).collect();
    archs.sort_unstable();
    archs.dedup();
    for arch in archs {
        let mine: Vec<&LooPoint> = points.iter().filter(|p| p.architecture == arch).collect();
        chart.push(format!("homogeneous {arch}"), mine.iter().map(|p| p.homogeneous.balanced_accuracy).collect());
        chart.push(format!("heterogeneous {arch}"), mine.iter().map(|p| p.heterogeneous.balanced_accuracy).collect());
    }
    out.write_chart("loo", &chart)
}

pub fn run(cfg: &RunConfig, opts: &FederateOptions) -> Result<()> {
    let mut out = Outputs::create(&cfg.out_dir, Stamp::new(COMMAND, cfg))?;
    let ids = run_subjects(cfg);
    let recs = load(cfg, &ids)?;
    let pipeline = cfg.pipeline();
    let subjects: Vec<PreparedSubject> =
        parallel_map(&recs, cfg.jobs, |r| prepare_subject(r, &pipeline)).into_iter().collect::<Result<_, _>>()?;
    let find = |id: u32| subjects.iter().find(|s| s.subject_id == id).expect("loaded above");

    let mut fed = cfg.federation(&[]);
    fed.run_id = out.stamp.run_id.clone();
    fed.validate()?;
    let mut cached = load_cached(cfg)?;
    let nodes: Vec<ClientNode> = cfg
        .clients
        .iter()
        .map(|&id| {
            let mut node = ClientNode::new(find(id).clone());
            for learner in cached.remove(&id).into_iter().flat_map(|m| m.into_values()) {
                node.insert_learner(learner);
            }
            if opts.inject_leak_client == Some(id) {
                node = node.with_behavior(ClientBehavior::LeakFeatures);
            }
            node
        })
        .collect();
    let held = CoordinatorDataset::from_prepared(find(cfg.held_out));
    info!("federating clients {:?}, holding out subject {}", cfg.clients, cfg.held_out);
    let (outcome, _) = run_federation(&fed, nodes, &held).context("federation")?;
    let audit = privacy_audit(&outcome.transcript.envelopes, Some(&outcome.audit_context));

    let local: Vec<LocalRow> = outcome.local.iter().map(LocalRow::of).collect();
    let global = global_rows(&outcome);
    for g in &outcome.globals {
        let name = format!("{}-{}", g.mode.kind().tag(), g.architecture);
        out.write(&format!("global/{name}.csv"), with_seed(&g.report.to_csv(), cfg.seed))?;
        out.write_json(&format!("global/{name}.json"), &g.report)?;
        println!(
            "{:<13} {:<7} balanced accuracy {:.4}  accuracy {:.4}  ({} base models)",
            g.mode.kind().tag(),
            g.architecture,
            g.report.macro_avg.balanced_accuracy,
            g.report.macro_avg.accuracy,
            g.base_models
        );
    }
    let mut chart = LineChart::new(
        &format!("Global per-label balanced accuracy, subject {} held out", cfg.held_out),
        "activity",
        "balanced accuracy",
        label_tags(),
    );
    for g in &global {
        chart.push(format!("{} {}", g.stacking.tag(), g.architecture), g.per_label.clone());
    }
    out.write_chart("per_label", &chart)?;
    out.write_table("summary.csv", &summary_table(&local, &global))?;
    out.write("transcript.jsonl", outcome.transcript.to_jsonl())?;
    out.write_json("audit.json", &audit)?;
    println!("audit: {audit}");
    if !outcome.excluded.is_empty() {
        println!("excluded clients: {:?}", outcome.excluded);
    }

    let mut failures = Vec::new();
    if !audit.passed {
        failures.push(format!("held out {}: {audit}", cfg.held_out));
    }
    let mut loo = Vec::new();
    if opts.loo {
        let rows = leave_one_out_run(&fed, &subjects).context("leave-one-out")?;
        loo = rows.iter().map(LooPoint::of).collect();
        for r in &rows {
            println!(
                "leave-one-out {:>2} {:<7} homogeneous {:.4}  heterogeneous {:.4}  audit {}",
                r.held_out,
                r.architecture,
                r.homogeneous.macro_avg.balanced_accuracy,
                r.heterogeneous.macro_avg.balanced_accuracy,
                if r.audit.passed { "PASS" } else { "FAIL" }
            );
            if !r.audit.passed {
                failures.push(format!("leave-one-out {}: {}", r.held_out, r.audit));
            }
        }
        loo_outputs(&mut out, &loo)?;
    }

    let summary = FederateSummary {
        held_out: outcome.held_out,
        participants: outcome.participants.clone(),
        excluded: outcome.excluded.clone(),
        local,
        global,
        audit_passed: failures.is_empty(),
        loo,
    };
    out.write_json(FEDERATE_SUMMARY, &summary)?;
    let status = if failures.is_empty() { "ok" } else { "audit-failed" };
    let manifest = out.finish(cfg, status)?;
    println!("federate: manifest {}", manifest.display());
    if !failures.is_empty() {
        return Err(AuditFailed(failures.join("; ")).into());
    }
    Ok(())
}
