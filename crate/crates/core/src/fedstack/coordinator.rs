//! The coordinator: drives a federation round over a transport, stacks the
//! clients' predictions, trains the meta-learners and scores them on the
//! held-out subject.

use std::collections::{BTreeMap, BTreeSet};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::audit::{features_digest, AuditContext};
use super::client::{ClientNode, JobSlots};
use super::protocol::{
    client_address, BatchMetadata, BatchPurpose, LocalReport, MessageEnvelope, MessageType, PredictionBatch,
    QueryBatch, Shutdown, TrainReport, TrainRequest, Transcript, COORDINATOR,
};
use super::stacking::{
    infer_unseen, stack_heterogeneous, stack_homogeneous, train_global, BasePredictions, InferenceMode,
    PredictionRecord, StackedTrainingSet, StackingKind, StackingMode,
};
use super::transport::{connect, CoordinatorEndpoint, TransportKind};
use super::{FedError, Result};
use crate::dataset::ActivityLabel;
use crate::features::one_hot_encode;
use crate::metrics::{MetricsReport, Provenance};
use crate::neural::{Architecture, TrainConfig, TrainedLearner};
use crate::pipeline::PreparedSubject;
use crate::rng::{derive_seed, seeded};

const GLOBAL_STREAM: u64 = 0x474c;
const ROTATION_STREAM: u64 = 0x524f;
const TEST_QUERY: u64 = 0;
const TRAIN_QUERY: u64 = 1;

/// Which base architectures each client trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "architectures")]
pub enum ArchitectureAssignment {
    /// Every client trains all of these.
    Every(Vec<Architecture>),
    /// One architecture per client.
    PerClient(BTreeMap<u32, Architecture>),
}

impl ArchitectureAssignment {
    pub fn for_client(&self, id: u32) -> Vec<Architecture> {
        match self {
            Self::Every(archs) => archs.clone(),
            Self::PerClient(map) => map.get(&id).copied().into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: Vec<u32>,
    pub held_out: u32,
    pub assignment: ArchitectureAssignment,
    pub global_architectures: Vec<Architecture>,
    pub stacking: Vec<StackingKind>,
    pub local_train: TrainConfig,
    pub global_train: TrainConfig,
    pub inference: InferenceMode,
    pub transport: TransportKind,
    pub port: u16,
    /// Resends before a client counts as unavailable.
    pub retries: u32,
    pub response_timeout_ms: u64,
    /// Share of clients drawn (seeded) to take part in the round.
    pub client_fraction: f64,
    /// Continue training each meta-learner on base predictions for the
    /// held-out subject's own training rows.
    pub global_finetune: bool,
    pub jobs: usize,
    pub run_id: String,
    pub config_hash: String,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: (1..=9).collect(),
            held_out: 10,
            assignment: ArchitectureAssignment::Every(Architecture::STANDARD.to_vec()),
            global_architectures: Architecture::STANDARD.to_vec(),
            stacking: StackingKind::BOTH.to_vec(),
            local_train: TrainConfig::default(),
            global_train: TrainConfig::default(),
            inference: InferenceMode::PerRow,
            transport: TransportKind::Inproc,
            port: 0,
            retries: 3,
            response_timeout_ms: 3_600_000,
            client_fraction: 1.0,
            global_finetune: false,
            jobs: thread::available_parallelism().map_or(1, |n| n.get()),
            run_id: String::new(),
            config_hash: String::new(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::InvalidConfig(m));
        if self.clients.is_empty() {
            return bad("no participating clients".into());
        }
        if self.clients.contains(&self.held_out) {
            return bad(format!("held-out subject {} is also a client", self.held_out));
        }
        let unique: BTreeSet<u32> = self.clients.iter().copied().collect();
        if unique.len() != self.clients.len() {
            return bad("duplicate client ids".into());
        }
        if self.global_architectures.is_empty() || self.stacking.is_empty() {
            return bad("need at least one global architecture and one stacking mode".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client fraction {} outside (0, 1]", self.client_fraction));
        }
        self.local_train.validate()?;
        self.global_train.validate()?;
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        Provenance { run_id: self.run_id.clone(), config_hash: self.config_hash.clone() }
    }

    /// Clients drawn for this round, ascending.
    pub fn draw_participants(&self) -> Vec<u32> {
        let mut ids = self.clients.clone();
        ids.sort_unstable();
        if self.client_fraction < 1.0 {
            let k = ((ids.len() as f64 * self.client_fraction).ceil() as usize).clamp(1, ids.len());
            let mut rng = seeded(derive_seed(self.local_train.seed, &[ROTATION_STREAM, u64::from(self.held_out)]));
            ids.shuffle(&mut rng);
            ids.truncate(k);
            ids.sort_unstable();
        }
        ids
    }
}

/// The held-out subject as the coordinator sees it: rows standardized with
/// that subject's own training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorDataset {
    pub subject_id: u32,
    pub test_rows: Vec<Vec<f64>>,
    pub test_labels: Vec<ActivityLabel>,
    pub train_rows: Vec<Vec<f64>>,
    pub train_labels: Vec<ActivityLabel>,
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl CoordinatorDataset {
    pub fn from_prepared(p: &PreparedSubject) -> Self {
        Self {
            subject_id: p.subject_id,
            test_rows: to_rows(&p.standardized_test()),
            test_labels: p.split.test_y.clone(),
            train_rows: to_rows(&p.standardized_train()),
            train_labels: p.split.train_y.clone(),
        }
    }

    pub fn source(&self) -> String {
        format!("subject-{}", self.subject_id)
    }

    pub fn audit_context(&self) -> AuditContext {
        AuditContext {
            coordinator_digests: [features_digest(&self.test_rows), features_digest(&self.train_rows)].into(),
        }
    }
}

/// One meta-learner and its score on the held-out subject.
#[derive(Debug, Clone)]
pub struct GlobalResult {
    pub architecture: Architecture,
    pub mode: StackingMode,
    pub stacked_rows: usize,
    pub scored_rows: usize,
    pub base_models: usize,
    pub report: MetricsReport,
    pub learner: TrainedLearner,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub held_out: u32,
    pub participants: Vec<u32>,
    /// Clients dropped after exhausting retries in the training round.
    pub excluded: Vec<u32>,
    pub local: Vec<LocalReport>,
    pub records: Vec<PredictionRecord>,
    pub globals: Vec<GlobalResult>,
    pub transcript: Transcript,
    pub audit_context: AuditContext,
}

impl FederationOutcome {
    pub fn global(&self, kind: StackingKind, arch: Architecture) -> Option<&GlobalResult> {
        self.globals.iter().find(|g| g.mode.kind() == kind && g.architecture == arch)
    }
}

/// What the coordinator is waiting for from one client.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Expect {
    Report,
    Batch { query: Option<u64>, arch: Architecture },
}

fn classify(env: &MessageEnvelope) -> Option<(u32, Expect)> {
    let client = env.client_sender()?;
    match env.msg_type {
        MessageType::TrainReport => Some((client, Expect::Report)),
        MessageType::PredictionBatch => {
            let meta: BatchMetadata = serde_json::from_value(env.payload.get("metadata")?.clone()).ok()?;
            let query = match meta.purpose {
                BatchPurpose::LocalTest => None,
                BatchPurpose::Query => Some(meta.query_id?),
            };
            Some((client, Expect::Batch { query, arch: meta.architecture }))
        }
        _ => None,
    }
}

/// Replies keyed by client and expectation.
type Replies = BTreeMap<(u32, Expect), MessageEnvelope>;

struct Coordinator<'a> {
    cfg: &'a FederationConfig,
    link: CoordinatorEndpoint,
    transcript: Transcript,
    seq: u64,
}

impl Coordinator<'_> {
    fn send(&mut self, client: u32, msg_type: MessageType, payload: &impl Serialize) -> Result<()> {
        let env = MessageEnvelope::new(msg_type, COORDINATOR, &client_address(client), self.seq, payload);
        self.seq += 1;
        self.link.send(client, &env)?;
        self.transcript.push(env);
        Ok(())
    }

    /// Waits until every expectation is met, resending through `resend` to
    /// clients still missing something. Returns the replies (canonically
    /// ordered) and the clients that never completed.
    fn collect(
        &mut self,
        mut pending: BTreeMap<u32, BTreeSet<Expect>>,
        mut resend: impl FnMut(&mut Self, u32) -> Result<()>,
    ) -> Result<(Replies, BTreeSet<u32>)> {
        let timeout = Duration::from_millis(self.cfg.response_timeout_ms);
        let mut got = BTreeMap::new();
        let mut arrived = Vec::new();
        let mut attempt = 0;
        loop {
            let deadline = Instant::now() + timeout;
            while pending.values().any(|s| !s.is_empty()) {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                let Some(env) = self.link.recv_timeout(deadline - now)? else { continue };
                if let Some((client, key)) = classify(&env) {
                    // a report carrying an error ends that client's round
                    let failed =
                        key == Expect::Report && env.payload.pointer("/metadata/error").is_some_and(|e| !e.is_null());
                    if let Some(set) = pending.get_mut(&client) {
                        if failed && set.contains(&Expect::Report) {
                            set.clear();
                        } else {
                            set.remove(&key);
                        }
                    }
                    got.entry((client, key)).or_insert_with(|| env.clone());
                }
                arrived.push(env);
            }
            let missing: Vec<u32> = pending.iter().filter(|(_, s)| !s.is_empty()).map(|(&c, _)| c).collect();
            if missing.is_empty() || attempt == self.cfg.retries {
                break;
            }
            attempt += 1;
            for c in missing {
                warn!("client {c} has not answered; retry {attempt}/{}", self.cfg.retries);
                resend(self, c)?;
            }
        }
        arrived.sort_by_key(|e| (e.client_sender(), e.seq));
        self.transcript.envelopes.extend(arrived);
        let missing = pending.into_iter().filter(|(_, s)| !s.is_empty()).map(|(c, _)| c).collect();
        Ok((got, missing))
    }

    fn train_round(&mut self, participants: &[u32]) -> Result<(Vec<u32>, Vec<LocalReport>, Vec<PredictionRecord>)> {
        let request = |cfg: &FederationConfig, c: u32| TrainRequest {
            round: 0,
            architectures: cfg.assignment.for_client(c),
            train_config: cfg.local_train,
            run_id: cfg.run_id.clone(),
            config_hash: cfg.config_hash.clone(),
        };
        let mut pending = BTreeMap::new();
        for &c in participants {
            let req = request(self.cfg, c);
            let mut keys: BTreeSet<Expect> =
                req.architectures.iter().map(|&arch| Expect::Batch { query: None, arch }).collect();
            keys.insert(Expect::Report);
            pending.insert(c, keys);
            self.send(c, MessageType::TrainRequest, &req)?;
        }
        let (got, missing) = self.collect(pending, |me, c| {
            let req = request(me.cfg, c);
            me.send(c, MessageType::TrainRequest, &req)
        })?;
        for c in &missing {
            warn!("client {c} excluded from stacking after {} retries", self.cfg.retries);
        }
        let mut local = Vec::new();
        let mut records = Vec::new();
        for ((client, key), env) in &got {
            if missing.contains(client) {
                continue;
            }
            match key {
                Expect::Report => {
                    let report: TrainReport = env.decode()?;
                    if let Some(message) = report.metadata.error {
                        return Err(FedError::ClientFailed { client: *client, message });
                    }
                    local.extend(report.metrics);
                }
                Expect::Batch { arch, .. } => {
                    let batch: PredictionBatch = env.decode()?;
                    let labels = batch.labels.ok_or_else(|| {
                        FedError::Protocol(format!("client {client} sent unlabeled local predictions"))
                    })?;
                    if labels.len() != batch.probabilities.len() || batch.metadata.sample_refs.len() != labels.len() {
                        return Err(FedError::Protocol(format!("client {client}: ragged {arch} batch")));
                    }
                    for ((probs, label), sample_ref) in
                        batch.probabilities.into_iter().zip(labels).zip(batch.metadata.sample_refs)
                    {
                        let r = PredictionRecord {
                            client_id: *client,
                            architecture: *arch,
                            sample_ref,
                            probs,
                            true_label: Some(label),
                        };
                        r.validate()?;
                        records.push(r);
                    }
                }
            }
        }
        let active = participants.iter().copied().filter(|c| !missing.contains(c)).collect();
        Ok((active, local, records))
    }

    /// Sends one query per (client, query id) and gathers every requested
    /// model's probabilities.
    fn query_round(
        &mut self,
        queries: &BTreeMap<u32, Vec<Architecture>>,
        blocks: &[(u64, &[Vec<f64>])],
        source: &str,
    ) -> Result<BTreeMap<(u64, u32, Architecture), Array2<f64>>> {
        let make = |qid: u64, rows: &[Vec<f64>], archs: &[Architecture]| QueryBatch {
            query_id: qid,
            source: source.to_string(),
            architectures: archs.to_vec(),
            sample_refs: (0..rows.len()).collect(),
            features: rows.to_vec(),
        };
        let mut pending = BTreeMap::new();
        for (&c, archs) in queries {
            let mut keys = BTreeSet::new();
            for &(qid, rows) in blocks {
                keys.extend(archs.iter().map(|&arch| Expect::Batch { query: Some(qid), arch }));
                self.send(c, MessageType::QueryBatch, &make(qid, rows, archs))?;
            }
            pending.insert(c, keys);
        }
        let (got, missing) = self.collect(pending, |me, c| {
            for &(qid, rows) in blocks {
                me.send(c, MessageType::QueryBatch, &make(qid, rows, &queries[&c]))?;
            }
            Ok(())
        })?;
        if let Some(&client) = missing.iter().next() {
            return Err(FedError::ClientUnavailable { client, attempts: self.cfg.retries + 1 });
        }
        let mut out = BTreeMap::new();
        for ((client, key), env) in got {
            let Expect::Batch { query: Some(qid), arch } = key else { continue };
            let batch: PredictionBatch = env.decode()?;
            let n = batch.probabilities.len();
            let flat: Vec<f64> = batch.probabilities.into_iter().flatten().collect();
            let probs = Array2::from_shape_vec((n, flat.len() / n.max(1)), flat)
                .map_err(|_| FedError::Protocol(format!("client {client}: ragged query answer")))?;
            out.insert((qid, client, arch), probs);
        }
        Ok(out)
    }

    fn run(&mut self, participants: &[u32], data: &CoordinatorDataset) -> Result<FederationOutcome> {
        let cfg = self.cfg;
        let (active, local, records) = self.train_round(participants)?;
        if active.is_empty() {
            return Err(FedError::InvalidConfig("no client completed the training round".into()));
        }
        let excluded = participants.iter().copied().filter(|c| !active.contains(c)).collect();
        let trained: BTreeMap<u32, BTreeSet<Architecture>> = active
            .iter()
            .map(|&c| (c, records.iter().filter(|r| r.client_id == c).map(|r| r.architecture).collect()))
            .collect();
        let all_archs: BTreeSet<Architecture> = trained.values().flatten().copied().collect();

        // meta-learners, each with the set of base architectures it consumes
        let mut plans = Vec::new();
        for &kind in &cfg.stacking {
            for &g in &cfg.global_architectures {
                let (stacked, bases): (StackedTrainingSet, BTreeSet<Architecture>) = match kind {
                    StackingKind::Homogeneous => (stack_homogeneous(&records, g)?, [g].into()),
                    StackingKind::Heterogeneous => (stack_heterogeneous(&records, &all_archs)?, all_archs.clone()),
                };
                let seed = derive_seed(
                    cfg.global_train.seed,
                    &[GLOBAL_STREAM, u64::from(cfg.held_out), kind as u64, g.stream_id()],
                );
                info!("training {g} meta-learner on {} stacked rows ({})", stacked.len(), stacked.mode);
                let learner = train_global(&stacked, g, &cfg.global_train.with_seed(seed))?;
                plans.push((g, stacked.mode, stacked.len(), bases, learner));
            }
        }

        let needed: BTreeSet<Architecture> = plans.iter().flat_map(|p| p.3.iter().copied()).collect();
        let queries: BTreeMap<u32, Vec<Architecture>> = trained
            .iter()
            .map(|(&c, archs)| (c, archs.intersection(&needed).copied().collect::<Vec<_>>()))
            .filter(|(_, a)| !a.is_empty())
            .collect();
        let mut blocks: Vec<(u64, &[Vec<f64>])> = vec![(TEST_QUERY, &data.test_rows)];
        if cfg.global_finetune {
            blocks.push((TRAIN_QUERY, &data.train_rows));
        }
        let answers = self.query_round(&queries, &blocks, &data.source())?;
        let base_for = |qid: u64, bases: &BTreeSet<Architecture>| -> Vec<BasePredictions> {
            answers
                .iter()
                .filter(|((q, _, a), _)| *q == qid && bases.contains(a))
                .map(|(&(_, c, a), p)| BasePredictions { client_id: c, architecture: a, probs: p.clone() })
                .collect()
        };

        let mut globals = Vec::new();
        for (g, mode, stacked_rows, bases, mut learner) in plans {
            if cfg.global_finetune {
                let train_base = base_for(TRAIN_QUERY, &bases);
                let views: Vec<_> = train_base.iter().map(|b| b.probs.view()).collect();
                let x = concatenate(Axis(0), &views).map_err(|e| FedError::Protocol(e.to_string()))?;
                let t = one_hot_encode(&data.train_labels).map_err(|e| FedError::InvalidRecord(e.to_string()))?.0;
                let tv = vec![t.view(); train_base.len()];
                let t = concatenate(Axis(0), &tv).map_err(|e| FedError::Protocol(e.to_string()))?;
                learner.fit(x.view(), t.view(), &cfg.global_train)?;
            }
            let base = base_for(TEST_QUERY, &bases);
            let score = infer_unseen(&learner, &base, &data.test_labels, cfg.inference, cfg.provenance())?;
            globals.push(GlobalResult {
                architecture: g,
                mode,
                stacked_rows,
                scored_rows: score.scored_rows,
                base_models: base.len(),
                report: score.report,
                learner,
            });
        }
        let mut local = local;
        local.sort_by_key(|r| (r.client_id, r.architecture));
        Ok(FederationOutcome {
            held_out: cfg.held_out,
            participants: participants.to_vec(),
            excluded,
            local,
            records,
            globals,
            transcript: Transcript::default(),
            audit_context: data.audit_context(),
        })
    }
}

/// Runs one federation round with `nodes` as clients and `data` as the
/// held-out subject. Client threads run concurrently; the coordinator
/// processes their replies in client-id order. The nodes come back with
/// their trained models.
pub fn run_federation(
    cfg: &FederationConfig,
    nodes: Vec<ClientNode>,
    data: &CoordinatorDataset,
) -> Result<(FederationOutcome, Vec<ClientNode>)> {
    cfg.validate()?;
    if data.subject_id != cfg.held_out {
        return Err(FedError::InvalidConfig(format!(
            "coordinator data is subject {}, config holds out {}",
            data.subject_id, cfg.held_out
        )));
    }
    let node_ids: BTreeSet<u32> = nodes.iter().map(|n| n.client_id).collect();
    let wanted: BTreeSet<u32> = cfg.clients.iter().copied().collect();
    if node_ids != wanted {
        return Err(FedError::InvalidConfig(format!("nodes {node_ids:?} do not match configured clients {wanted:?}")));
    }
    let participants = cfg.draw_participants();
    let (active, idle): (Vec<ClientNode>, Vec<ClientNode>) =
        nodes.into_iter().partition(|n| participants.contains(&n.client_id));
    let mut active = active;
    active.sort_by_key(|n| n.client_id);
    let (link, ends) = connect(cfg.transport, &participants, cfg.port)?;
    let slots = JobSlots::new(cfg.jobs);

    let (result, transcript, returned) = thread::scope(|s| {
        let slots = &slots;
        let handles: Vec<_> =
            active.into_iter().zip(ends).map(|(node, end)| s.spawn(move || node.serve(end, slots))).collect();
        let mut coord = Coordinator { cfg, link, transcript: Transcript::default(), seq: 0 };
        let result = coord.run(&participants, data);
        for &c in &participants {
            if let Err(e) = coord.send(c, MessageType::Shutdown, &Shutdown {}) {
                warn!("shutdown of client {c}: {e}");
            }
        }
        let Coordinator { link, transcript, .. } = coord;
        drop(link);
        let returned: Vec<_> = handles.into_iter().map(|h| h.join()).collect();
        (result, transcript, returned)
    });
    let mut nodes = idle;
    for r in returned {
        nodes.push(r.map_err(|_| FedError::Protocol("a client thread panicked".into()))?);
    }
    nodes.sort_by_key(|n| n.client_id);
    let mut outcome = result?;
    outcome.transcript = transcript;
    Ok((outcome, nodes))
}
