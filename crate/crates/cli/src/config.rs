//! Effective run settings and their layering:
//! defaults, then environment, then the `--config` JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedstack::dataset::SensorGroup;
use fedstack::fedstack::{ArchitectureAssignment, FederationConfig, InferenceMode, StackingKind, TransportKind};
use fedstack::neural::{Architecture, TrainConfig};
use fedstack::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_DATA_DIR: &str = "FEDSTACK_DATA_DIR";
pub const ENV_SEED: &str = "FEDSTACK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub test_fraction: f64,
    pub pca_threshold: f64,
    pub use_pca: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub global_epochs: usize,
    pub global_batch_size: usize,
    pub global_learning_rate: f64,
    pub clients: Vec<u32>,
    pub held_out: u32,
    pub architectures: Vec<Architecture>,
    pub global_architectures: Vec<Architecture>,
    pub transport: TransportKind,
    pub port: u16,
    pub retries: u32,
    pub response_timeout_ms: u64,
    pub client_fraction: f64,
    pub inference: InferenceMode,
    pub global_finetune: bool,
    pub sensors: Vec<SensorGroup>,
    /// Global architecture scored in the sensor ablation.
    pub ablation_architecture: Architecture,
    /// Overrides every per-section tolerance in `report` when set.
    pub tolerance: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        let train = TrainConfig::default();
        let pipeline = PipelineConfig::default();
        Self {
            data_dir: None,
            out_dir: PathBuf::from("fedstack-out"),
            seed: pipeline.seed,
            jobs: fed.jobs,
            test_fraction: pipeline.test_fraction,
            pca_threshold: pipeline.pca_threshold,
            use_pca: pipeline.use_pca,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            global_epochs: train.epochs,
            global_batch_size: train.batch_size,
            global_learning_rate: train.learning_rate,
            clients: fed.clients,
            held_out: fed.held_out,
            architectures: Architecture::STANDARD.to_vec(),
            global_architectures: fed.global_architectures,
            transport: fed.transport,
            port: fed.port,
            retries: fed.retries,
            response_timeout_ms: fed.response_timeout_ms,
            client_fraction: fed.client_fraction,
            inference: fed.inference,
            global_finetune: fed.global_finetune,
            sensors: SensorGroup::ALL.to_vec(),
            ablation_architecture: Architecture::Cnn1d,
            tolerance: None,
        }
    }
}

/// One configuration layer; unset fields fall through to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigLayer {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub test_fraction: Option<f64>,
    pub pca_threshold: Option<f64>,
    pub use_pca: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub global_epochs: Option<usize>,
    pub global_batch_size: Option<usize>,
    pub global_learning_rate: Option<f64>,
    pub clients: Option<Vec<u32>>,
    pub held_out: Option<u32>,
    pub architectures: Option<Vec<Architecture>>,
    pub global_architectures: Option<Vec<Architecture>>,
    pub transport: Option<TransportKind>,
    pub port: Option<u16>,
    pub retries: Option<u32>,
    pub response_timeout_ms: Option<u64>,
    pub client_fraction: Option<f64>,
    pub inference: Option<InferenceMode>,
    pub global_finetune: Option<bool>,
    pub sensors: Option<Vec<SensorGroup>>,
    pub ablation_architecture: Option<Architecture>,
    pub tolerance: Option<f64>,
}

macro_rules! overlay {
    ($cfg:expr, $layer:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $layer.$field { $cfg.$field = v; })*
    };
}

impl RunConfig {
    pub fn apply(&mut self, layer: ConfigLayer) {
        if layer.data_dir.is_some() {
            self.data_dir = layer.data_dir;
        }
        if layer.tolerance.is_some() {
            self.tolerance = layer.tolerance;
        }
        overlay!(
            self,
            layer,
            out_dir,
            seed,
            jobs,
            test_fraction,
            pca_threshold,
            use_pca,
            epochs,
            batch_size,
            learning_rate,
            global_epochs,
            global_batch_size,
            global_learning_rate,
            clients,
            held_out,
            architectures,
            global_architectures,
            transport,
            port,
            retries,
            response_timeout_ms,
            client_fraction,
            inference,
            global_finetune,
            sensors,
            ablation_architecture,
        );
    }

    /// Layers in increasing precedence: env, file, flags.
    pub fn resolve(env: impl Fn(&str) -> Option<String>, file: Option<&Path>, flags: ConfigLayer) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(env_layer(env)?);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let layer: ConfigLayer =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            cfg.apply(layer);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if self.architectures.is_empty() || self.global_architectures.is_empty() {
            bail!("architecture lists must not be empty");
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0 && t.is_finite()) {
                bail!("tolerance must be a non-negative number");
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("test_fraction must lie in (0, 1), got {}", self.test_fraction);
        }
        if !(self.pca_threshold > 0.0 && self.pca_threshold <= 1.0) {
            bail!("pca_threshold must lie in (0, 1], got {}", self.pca_threshold);
        }
        self.federation(&[]).validate()?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            test_fraction: self.test_fraction,
            pca_threshold: self.pca_threshold,
            use_pca: self.use_pca,
            sensor: None,
            seed: self.seed,
        }
    }

    pub fn local_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ..TrainConfig::default()
        }
        .with_seed(self.seed)
    }

    pub fn global_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.global_epochs,
            batch_size: self.global_batch_size,
            learning_rate: self.global_learning_rate,
            ..TrainConfig::default()
        }
        .with_seed(self.seed)
    }

    pub fn federation(&self, stacking: &[StackingKind]) -> FederationConfig {
        let mut fed = FederationConfig {
            clients: self.clients.clone(),
            held_out: self.held_out,
            assignment: ArchitectureAssignment::Every(self.architectures.clone()),
            global_architectures: self.global_architectures.clone(),
            local_train: self.local_train(),
            global_train: self.global_train(),
            inference: self.inference,
            transport: self.transport,
            port: self.port,
            retries: self.retries,
            response_timeout_ms: self.response_timeout_ms,
            client_fraction: self.client_fraction,
            global_finetune: self.global_finetune,
            jobs: self.jobs,
            run_id: String::new(),
            config_hash: self.hash(),
            ..FederationConfig::default()
        };
        if !stacking.is_empty() {
            fed.stacking = stacking.to_vec();
        }
        fed
    }

    /// The settings that can change results. Data and output locations,
    /// thread count, port and transport are left out since runs over the
    /// same logs produce identical numbers regardless of them.
    pub fn settings(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for key in ["data_dir", "out_dir", "jobs", "port", "transport"] {
                map.remove(key);
            }
        }
        v
    }

    /// SHA-256 of [`Self::settings`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.settings().to_string().as_bytes()))
    }

    /// Digest of the settings local models depend on; checkpoints are
    /// reusable between runs that agree on it.
    pub fn local_key(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "pca_threshold": self.pca_threshold,
            "use_pca": self.use_pca,
            "train": self.local_train(),
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

fn env_layer(env: impl Fn(&str) -> Option<String>) -> Result<ConfigLayer> {
    let seed = match env(ENV_SEED) {
        Some(s) if !s.trim().is_empty() => {
            Some(s.trim().parse().with_context(|| format!("{ENV_SEED}={s:?} is not an unsigned integer"))?)
        }
        _ => None,
    };
    let data_dir = env(ENV_DATA_DIR).filter(|s| !s.is_empty()).map(PathBuf::from);
    Ok(ConfigLayer { seed, data_dir, ..ConfigLayer::default() })
}
