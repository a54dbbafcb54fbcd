//! Leave-one-out: each subject in turn is the unseen client while the rest
//! federate. Local models do not depend on which subject is held out, so
//! each is trained once and reinstalled in later runs.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use super::audit::{privacy_audit, AuditReport};
use super::client::ClientNode;
use super::coordinator::{run_federation, CoordinatorDataset, FederationConfig};
use super::stacking::StackingKind;
use super::{FedError, Result};
use crate::metrics::MetricsReport;
use crate::neural::{Architecture, TrainedLearner};
use crate::pipeline::PreparedSubject;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub held_out: u32,
    pub architecture: Architecture,
    pub homogeneous: MetricsReport,
    pub heterogeneous: MetricsReport,
    /// Privacy audit of the run that produced this row.
    pub audit: AuditReport,
}

/// One row per (held-out subject, global architecture), ordered by subject.
/// `template` supplies everything but the client list and held-out id.
pub fn leave_one_out_run(template: &FederationConfig, subjects: &[PreparedSubject]) -> Result<Vec<LooRow>> {
    if subjects.len() < 3 {
        return Err(FedError::InvalidConfig(format!(
            "leave-one-out needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    let mut order: Vec<&PreparedSubject> = subjects.iter().collect();
    order.sort_by_key(|s| s.subject_id);
    let mut cache: BTreeMap<u32, BTreeMap<Architecture, TrainedLearner>> = BTreeMap::new();
    let mut rows = Vec::new();
    for held in &order {
        let cfg = FederationConfig {
            clients: order.iter().map(|s| s.subject_id).filter(|&id| id != held.subject_id).collect(),
            held_out: held.subject_id,
            stacking: StackingKind::BOTH.to_vec(),
            ..template.clone()
        };
        let nodes = order
            .iter()
            .filter(|s| s.subject_id != held.subject_id)
            .map(|s| {
                let mut node = ClientNode::new((*s).clone());
                for learner in cache.get(&s.subject_id).into_iter().flat_map(|m| m.values()) {
                    node.insert_learner(learner.clone());
                }
                node
            })
            .collect();
        info!("leave-one-out: holding out subject {}", held.subject_id);
        let (outcome, nodes) = run_federation(&cfg, nodes, &CoordinatorDataset::from_prepared(held))?;
        for node in nodes {
            cache.insert(node.client_id, node.into_learners());
        }
        let audit = privacy_audit(&outcome.transcript.envelopes, Some(&outcome.audit_context));
        for &arch in &cfg.global_architectures {
            let pick = |kind| {
                outcome.global(kind, arch).map(|g| g.report.clone()).ok_or_else(|| {
                    FedError::InvalidConfig(format!("no {} {arch} result for subject {}", kind.tag(), held.subject_id))
                })
            };
            rows.push(LooRow {
                held_out: held.subject_id,
                architecture: arch,
                homogeneous: pick(StackingKind::Homogeneous)?,
                heterogeneous: pick(StackingKind::Heterogeneous)?,
                audit: audit.clone(),
            });
        }
    }
    Ok(rows)
}
