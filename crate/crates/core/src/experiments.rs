//! Whole-dataset runs built from the federation pieces: a federation over
//! prepared subjects and the one-sensor-at-a-time ablation.

use std::collections::BTreeMap;

use crate::dataset::{SensorGroup, SubjectRecording};
use crate::fedstack::{
    run_federation, ClientNode, CoordinatorDataset, FedError, FederationConfig, FederationOutcome, Result, StackingKind,
};
use crate::metrics::MetricsReport;
use crate::neural::{Architecture, TrainedLearner};
use crate::pipeline::{prepare_subject, PipelineConfig, PreparedSubject};

/// Prepares every recording with the same pipeline settings.
pub fn prepare_all(recs: &[SubjectRecording], cfg: &PipelineConfig) -> Result<Vec<PreparedSubject>> {
    recs.iter().map(|r| prepare_subject(r, cfg).map_err(FedError::from)).collect()
}

/// Runs `cfg` over `subjects`, which must contain every configured client
/// and the held-out subject. Learners in `cached` are reinstalled on their
/// clients instead of being retrained.
pub fn federate_subjects(
    cfg: &FederationConfig,
    subjects: &[PreparedSubject],
    cached: &BTreeMap<u32, BTreeMap<Architecture, TrainedLearner>>,
) -> Result<(FederationOutcome, Vec<ClientNode>)> {
    let find = |id: u32| {
        subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| FedError::InvalidConfig(format!("subject {id} is not loaded")))
    };
    let held = CoordinatorDataset::from_prepared(find(cfg.held_out)?);
    let mut nodes = Vec::with_capacity(cfg.clients.len());
    for &id in &cfg.clients {
        let mut node = ClientNode::new(find(id)?.clone());
        for learner in cached.get(&id).into_iter().flat_map(BTreeMap::values) {
            node.insert_learner(learner.clone());
        }
        nodes.push(node);
    }
    run_federation(cfg, nodes, &held)
}

/// Outcome of one sensor-only federation.
#[derive(Debug, Clone)]
pub struct SensorRun {
    pub group: SensorGroup,
    pub input_dim: usize,
    pub report: MetricsReport,
    pub outcome: FederationOutcome,
}

/// Federates with only `group`'s columns and scores the heterogeneous
/// global of `arch`.
pub fn sensor_ablation(
    recs: &[SubjectRecording],
    group: SensorGroup,
    pipeline: &PipelineConfig,
    template: &FederationConfig,
    arch: Architecture,
) -> Result<SensorRun> {
    let subjects = prepare_all(recs, &PipelineConfig { sensor: Some(group), ..*pipeline })?;
    let cfg = FederationConfig {
        global_architectures: vec![arch],
        stacking: vec![StackingKind::Heterogeneous],
        ..template.clone()
    };
    let (outcome, _) = federate_subjects(&cfg, &subjects, &BTreeMap::new())?;
    let report = outcome
        .global(StackingKind::Heterogeneous, arch)
        .map(|g| g.report.clone())
        .ok_or_else(|| FedError::InvalidConfig(format!("no heterogeneous {arch} global")))?;
    let input_dim = subjects.first().map_or(0, PreparedSubject::input_dim);
    Ok(SensorRun { group, input_dim, report, outcome })
}
