//! Transcript audit: no client-originated envelope may carry feature rows,
//! and every query must come from the coordinator's own data.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::protocol::{parse_client_address, MessageEnvelope, MessageType, QueryBatch, COORDINATOR};

/// The only top-level payload keys a client may emit.
pub const CLIENT_PAYLOAD_KEYS: [&str; 4] = ["probabilities", "labels", "metrics", "metadata"];

const FEATURE_KEYS: [&str; 3] = ["features", "feature_rows", "x"];

/// SHA-256 over the shape and little-endian bytes of a row block.
pub fn features_digest(rows: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    h.update((rows.len() as u64).to_le_bytes());
    for row in rows {
        h.update((row.len() as u64).to_le_bytes());
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// What the coordinator knows about its own data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditContext {
    /// Digests of every row block the coordinator may legitimately send.
    pub coordinator_digests: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum ViolationKind {
    /// A client payload used a key outside the allowed set.
    ForbiddenKey(String),
    /// A feature-like field appeared somewhere inside a client payload.
    FeaturePayload(String),
    /// A client sent a message type only the coordinator may send.
    ClientSentRequest(MessageType),
    /// A query was sent by someone other than the coordinator.
    QueryNotFromCoordinator,
    /// A query's rows do not match any coordinator data block.
    ForeignQueryRows,
    UnknownSender,
    NonObjectPayload,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ForbiddenKey(k) => write!(f, "payload key {k:?} is not allowed from a client"),
            Self::FeaturePayload(p) => write!(f, "feature payload at {p}"),
            Self::ClientSentRequest(t) => write!(f, "client sent {t}"),
            Self::QueryNotFromCoordinator => f.write_str("query batch not sent by the coordinator"),
            Self::ForeignQueryRows => f.write_str("query rows do not come from the coordinator's data"),
            Self::UnknownSender => f.write_str("sender is neither the coordinator nor a client"),
            Self::NonObjectPayload => f.write_str("payload is not a JSON object"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Position of the envelope in the transcript.
    pub index: usize,
    pub sender: String,
    pub seq: u64,
    pub msg_type: MessageType,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "envelope #{} ({} seq {} from {}): {}", self.index, self.msg_type, self.seq, self.sender, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub envelopes: usize,
    pub client_envelopes: usize,
    /// Union of top-level payload keys seen from clients.
    pub client_keys: BTreeSet<String>,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed {
            write!(f, "PASS ({} envelopes, {} from clients)", self.envelopes, self.client_envelopes)?;
        } else {
            write!(f, "FAIL ({} violations)", self.violations.len())?;
            for v in &self.violations {
                write!(f, "\n  {v}")?;
            }
        }
        for w in &self.warnings {
            write!(f, "\n  warning: {w}")?;
        }
        Ok(())
    }
}

fn find_feature_keys(v: &Value, path: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let here = format!("{path}.{k}");
                if FEATURE_KEYS.contains(&k.as_str()) {
                    out.push(here.clone());
                }
                find_feature_keys(child, &here, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                find_feature_keys(child, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Checks a transcript. With a context, query rows must also hash to one
/// of the coordinator's known blocks.
pub fn privacy_audit(transcript: &[MessageEnvelope], ctx: Option<&AuditContext>) -> AuditReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut client_keys = BTreeSet::new();
    let mut client_envelopes = 0;
    if transcript.is_empty() {
        warnings.push("transcript contains zero messages".to_string());
    }
    for (index, env) in transcript.iter().enumerate() {
        let mut flag = |kind| {
            violations.push(Violation { index, sender: env.sender.clone(), seq: env.seq, msg_type: env.msg_type, kind })
        };
        let from_client = parse_client_address(&env.sender).is_some();
        if !from_client && env.sender != COORDINATOR {
            flag(ViolationKind::UnknownSender);
        }
        let Some(obj) = env.payload.as_object() else {
            flag(ViolationKind::NonObjectPayload);
            continue;
        };
        if from_client {
            client_envelopes += 1;
            if !matches!(env.msg_type, MessageType::TrainReport | MessageType::PredictionBatch) {
                flag(ViolationKind::ClientSentRequest(env.msg_type));
            }
            for key in obj.keys() {
                client_keys.insert(key.clone());
                if !CLIENT_PAYLOAD_KEYS.contains(&key.as_str()) {
                    flag(ViolationKind::ForbiddenKey(key.clone()));
                }
            }
            let mut paths = Vec::new();
            find_feature_keys(&env.payload, "payload", &mut paths);
            for p in paths {
                flag(ViolationKind::FeaturePayload(p));
            }
        }
        if env.msg_type == MessageType::QueryBatch {
            if env.sender != COORDINATOR {
                flag(ViolationKind::QueryNotFromCoordinator);
            } else if let Some(ctx) = ctx {
                let known = serde_json::from_value::<QueryBatch>(env.payload.clone())
                    .map(|q| ctx.coordinator_digests.contains(&features_digest(&q.features)))
                    .unwrap_or(false);
                if !known {
                    flag(ViolationKind::ForeignQueryRows);
                }
            }
        }
    }
    AuditReport {
        passed: violations.is_empty(),
        envelopes: transcript.len(),
        client_envelopes,
        client_keys,
        violations,
        warnings,
    }
}
