use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use fedstack::dataset::ActivityLabel;
use fedstack::metrics::{argmax, MetricsReport};
use fedstack::neural::{Architecture, Checkpoint, TrainedLearner};
use fedstack::pipeline::{prepare_subject, train_local_model, PreparedSubject};
use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{load, parallel_map};
use crate::config::RunConfig;
use crate::output::{cell, read_stamped, with_seed, Outputs, Stamp, Table};
use crate::results::{local_table, LocalRow, Scores, LOCAL_SUMMARY};
use crate::svg::LineChart;

pub const COMMAND: &str = "train-local";
const MODEL_INDEX: &str = "models/index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub client: u32,
    pub architecture: Architecture,
    /// Relative to the train-local output directory.
    pub path: String,
}

/// Checkpoints written by `train-local` and the local settings they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIndex {
    pub local_key: String,
    pub models: Vec<ModelEntry>,
}

struct Trained {
    row: LocalRow,
    report: MetricsReport,
    probs: Array2<f64>,
    learner: TrainedLearner,
}

fn train_one(data: &PreparedSubject, arch: Architecture, cfg: &RunConfig, stamp: &Stamp) -> Result<Trained> {
    let learner = train_local_model(data, arch, &cfg.local_train())?;
    let probs = learner.predict_proba(data.test_x.view())?;
    let report = MetricsReport::evaluate(probs.view(), data.test_t.0.view(), stamp.provenance())?;
    let row = LocalRow {
        client: data.subject_id,
        architecture: arch,
        n_train: data.train_x.nrows(),
        n_test: data.test_x.nrows(),
        input_dim: data.input_dim(),
        final_loss: learner.final_loss,
        scores: Scores::of(&report),
    };
    Ok(Trained { row, report, probs, learner })
}

fn predictions_table(labels: &[ActivityLabel], probs: &Array2<f64>) -> Table {
    let mut header = vec!["sample".to_string(), "true_label".into(), "predicted_label".into()];
    header.extend(ActivityLabel::all().map(|l| format!("p_{}", l.tag())));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&header);
    for (i, (label, p)) in labels.iter().zip(probs.rows()).enumerate() {
        let mut cells = vec![cell(i), label.tag(), ActivityLabel::from_index(argmax(p)).tag()];
        cells.extend(p.iter().map(cell));
        t.row(cells);
    }
    t
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(&cfg.out_dir, Stamp::new(COMMAND, cfg))?;
    let mut ids = cfg.clients.clone();
    ids.sort_unstable();
    let recs = load(cfg, &ids)?;
    let pipeline = cfg.pipeline();
    let subjects =
        parallel_map(&recs, cfg.jobs, |r| prepare_subject(r, &pipeline)).into_iter().collect::<Result<Vec<_>, _>>()?;

    let tasks: Vec<(usize, Architecture)> =
        (0..subjects.len()).flat_map(|i| cfg.architectures.iter().map(move |&a| (i, a))).collect();
    info!("training {} local models on {} threads", tasks.len(), cfg.jobs);
    let stamp = out.stamp.clone();
    let trained = parallel_map(&tasks, cfg.jobs, |&(i, arch)| {
        train_one(&subjects[i], arch, cfg, &stamp).with_context(|| format!("client {} {arch}", subjects[i].subject_id))
    });

    let epochs = cfg.epochs;
    let mut loss =
        LineChart::new("Local training loss", "epoch", "mean BCE", (1..=epochs).map(|e| e.to_string()).collect());
    let mut rows = Vec::with_capacity(trained.len());
    let mut index = ModelIndex { local_key: cfg.local_key(), models: Vec::new() };
    for (t, &(i, _)) in trained.into_iter().zip(&tasks) {
        let t = t?;
        let data = &subjects[i];
        let name = format!("client-{}-{}", t.row.client, t.row.architecture);
        out.write(&format!("local/{name}.csv"), with_seed(&t.report.to_csv(), cfg.seed))?;
        out.write_table(&format!("predictions/{name}.csv"), &predictions_table(data.test_labels(), &t.probs))?;
        let mut ckpt = Checkpoint::from_learner(&t.learner);
        ckpt.provenance = Some(out.stamp.provenance());
        let path = format!("models/{name}.json");
        out.write(&path, ckpt.to_json())?;
        index.models.push(ModelEntry { client: t.row.client, architecture: t.row.architecture, path });
        let mut trace = t.learner.loss_trace.clone();
        trace.resize(epochs, f64::NAN);
        loss.push(name, trace);
        println!(
            "client {:>2} {:<7} balanced accuracy {:.4}  accuracy {:.4}",
            t.row.client, t.row.architecture, t.row.scores.balanced_accuracy, t.row.scores.accuracy
        );
        rows.push(t.row);
    }
    out.write_json(MODEL_INDEX, &index)?;
    out.write_table("summary.csv", &local_table(&rows))?;
    out.write_json(LOCAL_SUMMARY, &rows)?;
    out.write_chart("loss", &loss)?;
    let manifest = out.finish(cfg, "ok")?;
    println!("train-local: {} models, manifest {}", rows.len(), manifest.display());
    Ok(())
}

/// Learners from an earlier `train-local` run under `out_dir`, if they were
/// trained with the same local settings.
pub fn load_cached(cfg: &RunConfig) -> Result<BTreeMap<u32, BTreeMap<Architecture, TrainedLearner>>> {
    let dir = cfg.out_dir.join(COMMAND);
    let index_path = dir.join(MODEL_INDEX);
    let mut cached: BTreeMap<u32, BTreeMap<Architecture, TrainedLearner>> = BTreeMap::new();
    if !index_path.is_file() {
        return Ok(cached);
    }
    let index: ModelIndex = read_stamped(&index_path)?;
    if index.local_key != cfg.local_key() {
        warn!("ignoring local models in {}: trained with different settings", dir.display());
        return Ok(cached);
    }
    for m in index.models.iter().filter(|m| cfg.clients.contains(&m.client)) {
        cached.entry(m.client).or_default().insert(m.architecture, load_checkpoint(&dir.join(&m.path))?);
    }
    let n: usize = cached.values().map(BTreeMap::len).sum();
    info!("reusing {n} local models from {}", dir.display());
    Ok(cached)
}

fn load_checkpoint(path: &Path) -> Result<TrainedLearner> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ckpt.into_learner().with_context(|| format!("restoring {}", path.display()))
}
