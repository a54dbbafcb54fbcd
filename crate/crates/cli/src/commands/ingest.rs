use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use fedstack::dataset::{
    discover_subjects, filter_null_activity, label_distribution, parse_subject_log, subject_log_name, write_csv,
    ActivityLabel, N_FEATURES,
};
use fedstack::pipeline::prepare_subject;
use fedstack::synthetic::{synthetic_subject, write_subject_log, SyntheticConfig};
use log::info;

use super::{data_dir, parallel_map};
use crate::config::RunConfig;
use crate::output::{Outputs, Stamp};
use crate::results::{label_tags, SubjectSummary, INGEST_SUMMARY};
use crate::svg::LineChart;

pub struct IngestOptions {
    /// Generate this many synthetic subject logs instead of reading a data directory.
    pub synthetic: Option<u32>,
    pub synthetic_rows: usize,
}

struct Ingested {
    summary: SubjectSummary,
    csv: Vec<u8>,
}

pub fn run(cfg: &RunConfig, opts: &IngestOptions) -> Result<()> {
    let mut out = Outputs::create(&cfg.out_dir, Stamp::new("ingest", cfg))?;
    let dir: PathBuf = match opts.synthetic {
        Some(n) => {
            if n == 0 {
                bail!("--synthetic needs at least one subject");
            }
            let syn =
                SyntheticConfig { rows_per_label: opts.synthetic_rows, seed: cfg.seed, ..SyntheticConfig::default() };
            for id in 1..=n {
                let mut log = Vec::new();
                write_subject_log(&synthetic_subject(id, &syn), &mut log)?;
                out.write(&format!("raw/{}", subject_log_name(id)), log)?;
            }
            out.dir().join("raw")
        }
        None => data_dir(cfg)?,
    };
    let ids = discover_subjects(&dir)?;
    if ids.is_empty() {
        bail!("{} contains no subject logs (expected {})", dir.display(), subject_log_name(1));
    }
    info!("ingesting subjects {ids:?} from {}", dir.display());

    let pipeline = cfg.pipeline();
    let results = parallel_map(&ids, cfg.jobs, |&id| -> Result<Ingested> {
        let raw = parse_subject_log(dir.join(subject_log_name(id)), id)?;
        let labeled = filter_null_activity(&raw);
        let dist = label_distribution(&labeled);
        let prepared = prepare_subject(&raw, &pipeline).with_context(|| format!("subject {id}"))?;
        let pca = &prepared.pipeline.features.pca;
        let mut csv = Vec::new();
        write_csv(&labeled, &mut csv)?;
        Ok(Ingested {
            summary: SubjectSummary {
                subject: id,
                rows: raw.len(),
                labeled_rows: labeled.len(),
                label_counts: ActivityLabel::all().map(|l| dist.count(l)).collect(),
                pca_cumulative: pca.cumulative_ratio().to_vec(),
                pca_selected: pca.n_selected,
            },
            csv,
        })
    });

    let mut summaries = Vec::with_capacity(ids.len());
    let mut counts = LineChart::new("Activity distribution per subject", "activity", "rows", label_tags());
    let mut variance = LineChart::new(
        "Cumulative explained variance",
        "components",
        "cumulative ratio",
        (1..=N_FEATURES).map(|k| k.to_string()).collect(),
    )
    .with_range(0.0, 1.0);
    for r in results {
        let r = r?;
        let s = r.summary;
        out.write(&format!("data/subject-{}.csv", s.subject), r.csv)?;
        counts.push(format!("subject-{}", s.subject), s.label_counts.iter().map(|&c| c as f64).collect());
        let mut cum = s.pca_cumulative.clone();
        cum.resize(N_FEATURES, f64::NAN);
        variance.push(format!("subject-{}", s.subject), cum);
        println!(
            "subject {:>2}: {} rows, {} labeled, {} PCA components",
            s.subject, s.rows, s.labeled_rows, s.pca_selected
        );
        summaries.push(s);
    }
    out.write_chart("distribution", &counts)?;
    out.write_chart("pca", &variance)?;
    out.write_json(INGEST_SUMMARY, &summaries)?;
    let manifest = out.finish(cfg, "ok")?;
    println!("ingest: {} subjects, manifest {}", summaries.len(), manifest.display());
    Ok(())
}
