use anyhow::{Context, Result};
use fedstack::experiments::sensor_ablation;
use fedstack::fedstack::privacy_audit;

use super::{load, run_subjects, AuditFailed};
use crate::config::RunConfig;
use crate::output::{cell, with_seed, Outputs, Stamp, Table};
use crate::results::{label_tags, per_label, Scores, SensorResult, SENSOR_SUMMARY};
use crate::svg::LineChart;

pub const COMMAND: &str = "ablate-sensor";

pub fn run(cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(&cfg.out_dir, Stamp::new(COMMAND, cfg))?;
    let recs = load(cfg, &run_subjects(cfg))?;
    let arch = cfg.ablation_architecture;
    let mut template = cfg.federation(&[]);
    template.run_id = out.stamp.run_id.clone();
    template.validate()?;

    let mut results = Vec::with_capacity(cfg.sensors.len());
    let mut failures = Vec::new();
    for &group in &cfg.sensors {
        let run = sensor_ablation(&recs, group, &cfg.pipeline(), &template, arch)
            .with_context(|| format!("{group} ablation"))?;
        let audit = privacy_audit(&run.outcome.transcript.envelopes, Some(&run.outcome.audit_context));
        if !audit.passed {
            failures.push(format!("{group}: {audit}"));
        }
        out.write(&format!("sensors/{group}.csv"), with_seed(&run.report.to_csv(), cfg.seed))?;
        out.write(&format!("transcripts/{group}.jsonl"), run.outcome.transcript.to_jsonl())?;
        println!(
            "{group:<11} {} inputs  heterogeneous {arch} balanced accuracy {:.4}  audit {}",
            run.input_dim,
            run.report.macro_avg.balanced_accuracy,
            if audit.passed { "PASS" } else { "FAIL" }
        );
        results.push(SensorResult {
            group,
            architecture: arch,
            input_dim: run.input_dim,
            scores: Scores::of(&run.report),
            per_label: per_label(&run.report),
            audit_passed: audit.passed,
        });
    }

    let mut chart = LineChart::new(
        &format!("Per-label balanced accuracy with one sensor, heterogeneous {arch}"),
        "activity",
        "balanced accuracy",
        label_tags(),
    );
    let mut header = vec!["sensor", "architecture", "input_dim"];
    header.extend(Scores::HEADER);
    let mut table = Table::new(&header);
    for r in &results {
        chart.push(r.group.tag(), r.per_label.clone());
        let mut cells = vec![cell(r.group), cell(r.architecture), cell(r.input_dim)];
        cells.extend(r.scores.cells());
        table.row(cells);
    }
    out.write_chart("sensors", &chart)?;
    out.write_table("summary.csv", &table)?;
    out.write_json(SENSOR_SUMMARY, &results)?;
    let manifest = out.finish(cfg, if failures.is_empty() { "ok" } else { "audit-failed" })?;
    println!("ablate-sensor: manifest {}", manifest.display());
    if !failures.is_empty() {
        return Err(AuditFailed(failures.join("; ")).into());
    }
    Ok(())
}
