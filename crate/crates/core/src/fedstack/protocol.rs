//! Envelopes, typed payloads and the newline-delimited JSON transcript.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FedError, Result};
use crate::dataset::ActivityLabel;
use crate::metrics::MetricsReport;
use crate::neural::{Architecture, TrainConfig};

pub const PROTOCOL_VERSION: u32 = 1;
pub const COORDINATOR: &str = "coordinator";

pub fn client_address(id: u32) -> String {
    format!("client-{id}")
}

pub fn parse_client_address(addr: &str) -> Option<u32> {
    addr.strip_prefix("client-")?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageType {
    TrainRequest,
    TrainReport,
    QueryBatch,
    PredictionBatch,
    Shutdown,
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One protocol message. `seq` counts messages per sender, starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub v: u32,
    #[serde(rename = "type")]
    pub msg_type: MessageType,
    pub sender: String,
    pub recipient: String,
    pub seq: u64,
    pub payload: Value,
}

impl MessageEnvelope {
    pub fn new(msg_type: MessageType, sender: &str, recipient: &str, seq: u64, payload: &impl Serialize) -> Self {
        let payload = serde_json::to_value(payload).expect("payload serializes");
        Self { v: PROTOCOL_VERSION, msg_type, sender: sender.into(), recipient: recipient.into(), seq, payload }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let env: Self = serde_json::from_str(line).map_err(|e| FedError::Protocol(format!("bad envelope: {e}")))?;
        if env.v != PROTOCOL_VERSION {
            return Err(FedError::Protocol(format!("unsupported protocol version {}", env.v)));
        }
        if !env.payload.is_object() {
            return Err(FedError::Protocol(format!("{} payload is not a JSON object", env.msg_type)));
        }
        Ok(env)
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| FedError::Protocol(format!("{} from {}: {e}", self.msg_type, self.sender)))
    }

    pub fn client_sender(&self) -> Option<u32> {
        parse_client_address(&self.sender)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub round: u32,
    pub architectures: Vec<Architecture>,
    pub train_config: TrainConfig,
    pub run_id: String,
    pub config_hash: String,
}

/// Outcome of training one architecture on one client, scored on that
/// client's own test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub client_id: u32,
    pub architecture: Architecture,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub final_loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub client_id: u32,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<LocalReport>,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPurpose {
    /// Predictions on the client's own test rows, paired with labels.
    LocalTest,
    /// Answers to a coordinator query; never labeled.
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetadata {
    pub client_id: u32,
    pub architecture: Architecture,
    pub purpose: BatchPurpose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
    pub sample_refs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub probabilities: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<ActivityLabel>>,
    pub metadata: BatchMetadata,
}

/// Rows of the coordinator's own data set, already standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub query_id: u64,
    /// Names the coordinator data set the rows come from.
    pub source: String,
    pub architectures: Vec<Architecture>,
    pub sample_refs: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Shutdown {}

/// Every envelope of a run in the order the coordinator processed them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub envelopes: Vec<MessageEnvelope>,
}

impl Transcript {
    pub fn push(&mut self, env: MessageEnvelope) {
        self.envelopes.push(env);
    }

    pub fn len(&self) -> usize {
        self.envelopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.envelopes.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for env in &self.envelopes {
            writeln!(out, "{}", env.to_line())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()
    }

    pub fn read_jsonl(reader: impl std::io::Read) -> Result<Self> {
        let mut envelopes = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                envelopes.push(MessageEnvelope::from_line(&line)?);
            }
        }
        Ok(Self { envelopes })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}
