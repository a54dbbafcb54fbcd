//! Per-subject preparation shared by clients and the coordinator:
//! drop unlabeled rows, optionally keep one sensor, split, standardize,
//! project, one-hot encode.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{filter_null_activity, sensor_slice, ActivityLabel, SensorGroup, SubjectRecording};
use crate::features::{
    one_hot_encode, standardize, train_test_split, FeatureError, FeaturePipeline, OneHotLabels, SplitDataset,
    DEFAULT_TEST_FRACTION, DEFAULT_VARIANCE_THRESHOLD,
};
use crate::neural::{train, Architecture, LearnerSpec, NeuralError, TrainConfig, TrainedLearner};
use crate::rng::derive_seed;

const SPLIT_STREAM: u64 = 0x5350;
const LOCAL_STREAM: u64 = 0x4c4f;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("subject {subject}: {source}")]
    Features { subject: u32, source: FeatureError },
    #[error("subject {subject}, {architecture}: {source}")]
    Training { subject: u32, architecture: Architecture, source: NeuralError },
    #[error("subject {0} has no labeled rows")]
    NoLabeledRows(u32),
}

/// How raw rows become model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub test_fraction: f64,
    pub pca_threshold: f64,
    /// When false the learners see standardized axes instead of PCA scores.
    pub use_pca: bool,
    pub sensor: Option<SensorGroup>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            test_fraction: DEFAULT_TEST_FRACTION,
            pca_threshold: DEFAULT_VARIANCE_THRESHOLD,
            use_pca: true,
            sensor: None,
            seed: 42,
        }
    }
}

/// Fitted standardizer and PCA, plus the choice of which one feeds the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPipeline {
    pub features: FeaturePipeline,
    pub use_pca: bool,
}

impl InputPipeline {
    pub fn input_dim(&self) -> usize {
        if self.use_pca {
            self.features.output_dim()
        } else {
            self.features.standardizer.dim()
        }
    }

    pub fn standardize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        standardize(x, &self.features.standardizer)
    }

    /// Model inputs from rows that are already standardized.
    pub fn project(&self, z: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        if self.use_pca {
            self.features.project_standardized(z)
        } else if z.ncols() != self.input_dim() {
            Err(FeatureError::DimensionMismatch { expected: self.input_dim(), found: z.ncols() })
        } else {
            Ok(z.to_owned())
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        self.project(self.standardize(x)?.view())
    }
}

/// One subject ready for training: the raw split, the fitted pipeline and
/// the projected, one-hot encoded train and test blocks.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub subject_id: u32,
    pub split: SplitDataset,
    pub pipeline: InputPipeline,
    pub train_x: Array2<f64>,
    pub test_x: Array2<f64>,
    pub train_t: OneHotLabels,
    pub test_t: OneHotLabels,
}

impl PreparedSubject {
    pub fn input_dim(&self) -> usize {
        self.pipeline.input_dim()
    }

    pub fn test_labels(&self) -> &[ActivityLabel] {
        &self.split.test_y
    }

    /// Test rows standardized with this subject's own training statistics.
    pub fn standardized_test(&self) -> Array2<f64> {
        self.pipeline.standardize(self.split.test_x.view()).expect("width fixed at fit time")
    }

    pub fn standardized_train(&self) -> Array2<f64> {
        self.pipeline.standardize(self.split.train_x.view()).expect("width fixed at fit time")
    }
}

pub fn split_seed(base: u64, subject: u32) -> u64 {
    derive_seed(base, &[SPLIT_STREAM, u64::from(subject)])
}

/// Seed of the local model `arch` on `subject`; independent of which
/// subject is held out, so trained models can be reused across runs.
pub fn local_seed(base: u64, subject: u32, arch: Architecture) -> u64 {
    derive_seed(base, &[LOCAL_STREAM, u64::from(subject), arch.stream_id()])
}

pub fn prepare_subject(rec: &SubjectRecording, cfg: &PipelineConfig) -> Result<PreparedSubject, PipelineError> {
    let subject = rec.subject_id;
    let wrap = |source| PipelineError::Features { subject, source };
    let mut labeled = filter_null_activity(rec);
    if labeled.is_empty() {
        return Err(PipelineError::NoLabeledRows(subject));
    }
    if let Some(group) = cfg.sensor {
        labeled = sensor_slice(&labeled, group);
    }
    let split =
        train_test_split(labeled.features.view(), &labeled.labels, cfg.test_fraction, split_seed(cfg.seed, subject))
            .map_err(wrap)?;
    let features = FeaturePipeline::fit(split.train_x.view(), cfg.pca_threshold).map_err(wrap)?;
    let pipeline = InputPipeline { features, use_pca: cfg.use_pca };
    let train_x = pipeline.transform(split.train_x.view()).map_err(wrap)?;
    let test_x = pipeline.transform(split.test_x.view()).map_err(wrap)?;
    let train_t = one_hot_encode(&split.train_y).map_err(wrap)?;
    let test_t = one_hot_encode(&split.test_y).map_err(wrap)?;
    Ok(PreparedSubject { subject_id: subject, split, pipeline, train_x, test_x, train_t, test_t })
}

/// Trains `arch` on the subject's training block with the subject-specific seed.
pub fn train_local_model(
    data: &PreparedSubject,
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<TrainedLearner, PipelineError> {
    let spec = LearnerSpec::new(arch, data.input_dim());
    let cfg = cfg.with_seed(local_seed(cfg.seed, data.subject_id, arch));
    train(&spec, data.train_x.view(), data.train_t.0.view(), &cfg).map_err(|source| PipelineError::Training {
        subject: data.subject_id,
        architecture: arch,
        source,
    })
}
