//! Self-describing JSON checkpoints.
//!
//! A checkpoint holds the learner spec, the training config (and so the
//! seed), the loss trace and every parameter flattened row-major. Floats are
//! written in shortest round-trip form, so a reloaded learner predicts
//! bit-identically.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LearnerSpec, Network, NeuralError, Result, TrainConfig, TrainedLearner};
use crate::metrics::Provenance;
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "fedstack-learner";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: &str, m: &Array2<f64>) -> Self {
        Self { name: name.to_string(), shape: m.shape().to_vec(), data: m.iter().copied().collect() }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] if r * c == self.data.len() => {
                Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("length checked"))
            }
            _ => Err(NeuralError::Checkpoint(format!("tensor {} has inconsistent shape {:?}", self.name, self.shape))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: LearnerSpec,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub loss_trace: Vec<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub parameters: Vec<Tensor>,
    /// Run that wrote the checkpoint, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Checkpoint {
    pub fn from_learner(learner: &TrainedLearner) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: learner.spec.clone(),
            seed: learner.config.seed,
            train_config: learner.config,
            loss_trace: learner.loss_trace.clone(),
            initial_loss: finite(learner.initial_loss),
            final_loss: finite(learner.final_loss),
            parameters: learner.network().params().iter().map(|p| Tensor::from_matrix(&p.name, &p.value)).collect(),
            provenance: None,
        }
    }

    pub fn into_learner(self) -> Result<TrainedLearner> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported format {} v{}", self.format, self.version)));
        }
        self.spec.validate()?;
        let mut network = Network::init(&self.spec, &mut rng::seeded(self.seed));
        {
            let mut params = network.params_mut();
            if params.len() != self.parameters.len() {
                return Err(NeuralError::Checkpoint(format!(
                    "expected {} parameter tensors, found {}",
                    params.len(),
                    self.parameters.len()
                )));
            }
            for (p, t) in params.iter_mut().zip(&self.parameters) {
                let value = t.to_matrix()?;
                if t.name != p.name || value.dim() != p.value.dim() {
                    return Err(NeuralError::Checkpoint(format!(
                        "tensor {} {:?} does not match {} {:?}",
                        t.name,
                        t.shape,
                        p.name,
                        p.value.shape()
                    )));
                }
                p.value = value;
            }
        }
        let mut learner = TrainedLearner::from_network(self.spec, self.train_config, network);
        learner.loss_trace = self.loss_trace;
        learner.initial_loss = self.initial_loss.unwrap_or(f64::NAN);
        learner.final_loss = self.final_loss.unwrap_or(f64::NAN);
        Ok(learner)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}
