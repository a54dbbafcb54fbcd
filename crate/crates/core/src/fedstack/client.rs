//! Client nodes: private data, local learners and the message loop.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use log::{debug, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::protocol::{
    client_address, BatchMetadata, BatchPurpose, LocalReport, MessageEnvelope, MessageType, PredictionBatch,
    QueryBatch, ReportMetadata, TrainReport, TrainRequest, COORDINATOR,
};
use super::stacking::{records_from_probs, PredictionRecord};
use super::transport::ClientEndpoint;
use super::{FedError, Result};
use crate::metrics::{MetricsReport, Provenance};
use crate::neural::{Architecture, TrainConfig, TrainedLearner};
use crate::pipeline::{train_local_model, PipelineError, PreparedSubject};

/// How a client reacts to requests. Anything but `Honest` is a test hook.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientBehavior {
    #[default]
    Honest,
    /// Never answers training requests.
    Straggler,
    /// Trains and reports but never answers queries.
    DropsQueries,
    /// Attaches raw training rows to its train report.
    LeakFeatures,
}

/// Bounds how many clients train at once.
pub struct JobSlots {
    free: Mutex<usize>,
    ready: Condvar,
}

pub struct SlotGuard<'a>(&'a JobSlots);

impl JobSlots {
    pub fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), ready: Condvar::new() }
    }

    pub fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.ready.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock") += 1;
        self.0.ready.notify_one();
    }
}

/// A participant holding one subject's data. The data never leaves the node;
/// only reports and probability vectors do.
pub struct ClientNode {
    pub client_id: u32,
    data: PreparedSubject,
    learners: BTreeMap<Architecture, TrainedLearner>,
    pub behavior: ClientBehavior,
}

impl ClientNode {
    pub fn new(data: PreparedSubject) -> Self {
        Self { client_id: data.subject_id, data, learners: BTreeMap::new(), behavior: ClientBehavior::Honest }
    }

    pub fn with_behavior(mut self, behavior: ClientBehavior) -> Self {
        self.behavior = behavior;
        self
    }

    /// Installs an already trained model, e.g. one reused from an earlier run.
    pub fn insert_learner(&mut self, learner: TrainedLearner) {
        self.learners.insert(learner.architecture(), learner);
    }

    pub fn learners(&self) -> &BTreeMap<Architecture, TrainedLearner> {
        &self.learners
    }

    pub fn into_learners(self) -> BTreeMap<Architecture, TrainedLearner> {
        self.learners
    }

    pub fn input_dim(&self) -> usize {
        self.data.input_dim()
    }

    pub fn n_test(&self) -> usize {
        self.data.test_x.nrows()
    }

    /// Trains `arch` (unless a model is already installed) and scores it on
    /// the node's own test rows.
    pub fn train_local(
        &mut self,
        arch: Architecture,
        cfg: &TrainConfig,
        provenance: Provenance,
    ) -> Result<(LocalReport, Vec<PredictionRecord>)> {
        if !self.learners.contains_key(&arch) {
            let learner = train_local_model(&self.data, arch, cfg).map_err(|e| match e {
                PipelineError::Training { source, .. } => FedError::ClientTraining { client: self.client_id, source },
                other => FedError::Pipeline(other),
            })?;
            self.learners.insert(arch, learner);
        }
        let learner = &self.learners[&arch];
        let probs = learner.predict_proba(self.data.test_x.view())?;
        let report = MetricsReport::evaluate(probs.view(), self.data.test_t.0.view(), provenance)?;
        let records = records_from_probs(self.client_id, arch, probs.view(), Some(self.data.test_labels()));
        let local = LocalReport {
            client_id: self.client_id,
            architecture: arch,
            n_train: self.data.train_x.nrows(),
            n_test: self.n_test(),
            input_dim: self.input_dim(),
            final_loss: learner.final_loss,
            report,
        };
        Ok((local, records))
    }

    /// Probabilities of each requested model on coordinator rows, projected
    /// through this node's own feature pipeline.
    pub fn answer_query(&self, query: &QueryBatch) -> Result<Vec<PredictionBatch>> {
        let width = query.features.first().map_or(0, Vec::len);
        let flat: Vec<f64> = query.features.iter().flatten().copied().collect();
        let z = Array2::from_shape_vec((query.features.len(), width), flat)
            .map_err(|_| FedError::Protocol("ragged query rows".into()))?;
        let x = self.data.pipeline.project(z.view()).map_err(|e| FedError::Protocol(e.to_string()))?;
        query
            .architectures
            .iter()
            .map(|&arch| {
                let learner = self
                    .learners
                    .get(&arch)
                    .ok_or(FedError::MissingArchitecture { client: self.client_id, architecture: arch })?;
                let probs = learner.predict_proba(x.view())?;
                Ok(PredictionBatch {
                    probabilities: probs.rows().into_iter().map(|r| r.to_vec()).collect(),
                    labels: None,
                    metadata: BatchMetadata {
                        client_id: self.client_id,
                        architecture: arch,
                        purpose: BatchPurpose::Query,
                        query_id: Some(query.query_id),
                        sample_refs: query.sample_refs.clone(),
                    },
                })
            })
            .collect()
    }

    fn on_train_request(&mut self, req: &TrainRequest, slots: &JobSlots) -> (serde_json::Value, Vec<PredictionBatch>) {
        let provenance = Provenance { run_id: req.run_id.clone(), config_hash: req.config_hash.clone() };
        let mut metrics = Vec::new();
        let mut batches = Vec::new();
        let mut error = None;
        {
            let _slot = slots.acquire();
            for &arch in &req.architectures {
                match self.train_local(arch, &req.train_config, provenance.clone()) {
                    Ok((local, records)) => {
                        batches.push(PredictionBatch {
                            probabilities: records.iter().map(|r| r.probs.clone()).collect(),
                            labels: Some(
                                records.iter().map(|r| r.true_label.expect("own test rows are labeled")).collect(),
                            ),
                            metadata: BatchMetadata {
                                client_id: self.client_id,
                                architecture: arch,
                                purpose: BatchPurpose::LocalTest,
                                query_id: None,
                                sample_refs: records.iter().map(|r| r.sample_ref).collect(),
                            },
                        });
                        metrics.push(local);
                    }
                    Err(e) => {
                        error = Some(e.to_string());
                        batches.clear();
                        break;
                    }
                }
            }
        }
        let report =
            TrainReport { metrics, metadata: ReportMetadata { client_id: self.client_id, round: req.round, error } };
        let mut payload = serde_json::to_value(report).expect("report serializes");
        if self.behavior == ClientBehavior::LeakFeatures {
            let rows: Vec<Vec<f64>> = self.data.split.train_x.rows().into_iter().take(4).map(|r| r.to_vec()).collect();
            payload["features"] = serde_json::to_value(rows).expect("rows serialize");
        }
        (payload, batches)
    }

    /// Message loop; returns the node (with its trained models) on shutdown.
    pub fn serve(mut self, mut link: ClientEndpoint, slots: &JobSlots) -> Self {
        let me = client_address(self.client_id);
        let mut seq = 0u64;
        let mut send = |link: &mut ClientEndpoint, msg_type, payload: serde_json::Value| {
            let env = MessageEnvelope::new(msg_type, &me, COORDINATOR, seq, &payload);
            seq += 1;
            if let Err(e) = link.send(&env) {
                warn!("{me}: {e}");
            }
        };
        while let Some(msg) = link.recv() {
            let env = match msg {
                Ok(env) => env,
                Err(e) => {
                    warn!("{me}: dropping unreadable message: {e}");
                    continue;
                }
            };
            match env.msg_type {
                MessageType::Shutdown => break,
                MessageType::TrainRequest => {
                    if self.behavior == ClientBehavior::Straggler {
                        debug!("{me}: ignoring train request");
                        continue;
                    }
                    let req: TrainRequest = match env.decode() {
                        Ok(r) => r,
                        Err(e) => {
                            warn!("{me}: {e}");
                            continue;
                        }
                    };
                    let (report, batches) = self.on_train_request(&req, slots);
                    send(&mut link, MessageType::TrainReport, report);
                    for b in &batches {
                        send(&mut link, MessageType::PredictionBatch, to_value(b));
                    }
                }
                MessageType::QueryBatch => {
                    if self.behavior == ClientBehavior::DropsQueries {
                        continue;
                    }
                    match env.decode::<QueryBatch>().and_then(|q| self.answer_query(&q)) {
                        Ok(batches) => {
                            for b in &batches {
                                send(&mut link, MessageType::PredictionBatch, to_value(b));
                            }
                        }
                        Err(e) => warn!("{me}: cannot answer query: {e}"),
                    }
                }
                other => warn!("{me}: unexpected {other} from {}", env.sender),
            }
        }
        self
    }
}

fn to_value(batch: &PredictionBatch) -> serde_json::Value {
    serde_json::to_value(batch).expect("batch serializes")
}
