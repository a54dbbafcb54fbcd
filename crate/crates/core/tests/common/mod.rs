#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use fedstack::fedstack::{ClientNode, CoordinatorDataset, FederationConfig};
use fedstack::neural::{Architecture, TrainConfig};
use fedstack::pipeline::{prepare_subject, PipelineConfig, PreparedSubject};
use fedstack::synthetic::{synthetic_subject, SyntheticConfig};

pub fn prepared(ids: &[u32]) -> Vec<PreparedSubject> {
    let cfg = SyntheticConfig::small();
    ids.iter().map(|&id| prepare_subject(&synthetic_subject(id, &cfg), &PipelineConfig::default()).unwrap()).collect()
}

pub fn quick_train() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 32, learning_rate: 5e-3, ..TrainConfig::default() }
}

/// Subjects 1..=n-1 as clients, subject n held out.
pub fn small_federation(n: u32) -> (FederationConfig, Vec<ClientNode>, CoordinatorDataset) {
    let ids: Vec<u32> = (1..=n).collect();
    let mut subjects = prepared(&ids);
    let held = subjects.pop().unwrap();
    let cfg = FederationConfig {
        clients: ids[..ids.len() - 1].to_vec(),
        held_out: n,
        local_train: quick_train(),
        global_train: quick_train(),
        jobs: 4,
        response_timeout_ms: 120_000,
        run_id: "test".into(),
        config_hash: "0".into(),
        ..FederationConfig::default()
    };
    let nodes = subjects.into_iter().map(ClientNode::new).collect();
    (cfg, nodes, CoordinatorDataset::from_prepared(&held))
}

pub fn fast_archs() -> Vec<Architecture> {
    vec![Architecture::Ann, Architecture::LinearSoftmax]
}
