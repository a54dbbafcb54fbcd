//! Federation layer: clients, coordinator, the prediction-only protocol,
//! stacking, meta-learner training, unseen-subject scoring and the
//! transcript audit.

mod audit;
mod client;
mod coordinator;
mod loo;
mod protocol;
mod stacking;
mod transport;

use thiserror::Error;

pub use audit::{
    features_digest, privacy_audit, AuditContext, AuditReport, Violation, ViolationKind, CLIENT_PAYLOAD_KEYS,
};
pub use client::{ClientBehavior, ClientNode, JobSlots};
pub use coordinator::{
    run_federation, ArchitectureAssignment, CoordinatorDataset, FederationConfig, FederationOutcome, GlobalResult,
};
pub use loo::{leave_one_out_run, LooRow};
pub use protocol::{
    client_address, parse_client_address, BatchMetadata, BatchPurpose, LocalReport, MessageEnvelope, MessageType,
    PredictionBatch, QueryBatch, ReportMetadata, Shutdown, TrainReport, TrainRequest, Transcript, COORDINATOR,
    PROTOCOL_VERSION,
};
pub use stacking::{
    infer_unseen, records_from_probs, stack_heterogeneous, stack_homogeneous, train_global, BasePredictions,
    InferenceMode, PredictionRecord, StackedTrainingSet, StackingKind, StackingMode, UnseenScore, PROB_SUM_TOL,
};
pub use transport::{connect, ClientEndpoint, CoordinatorEndpoint, TransportKind};

use crate::metrics::MetricsError;
use crate::neural::{Architecture, NeuralError};
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("client {client} has no {architecture} predictions")]
    MissingArchitecture { client: u32, architecture: Architecture },
    #[error("heterogeneous stacking needs at least 2 architectures, found {found}")]
    InsufficientDiversity { found: usize },
    #[error("nothing to stack")]
    EmptyStack,
    #[error("client {client} sample {sample_ref} has no true label")]
    MissingLabel { client: u32, sample_ref: usize },
    #[error("invalid prediction record: {0}")]
    InvalidRecord(String),
    #[error("client {client} did not answer after {attempts} attempts")]
    ClientUnavailable { client: u32, attempts: u32 },
    #[error("client {client}: {source}")]
    ClientTraining { client: u32, source: NeuralError },
    #[error("client {client} reported a failure: {message}")]
    ClientFailed { client: u32, message: String },
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;
