//! From-scratch neural learners: layers with hand-written backward passes,
//! Adam, and the ANN / 1-D CNN / Bi-LSTM / linear-softmax architectures
//! behind one train / predict-probability contract.
//!
//! All learners end in a softmax over the 12 activities and are trained
//! against one-hot targets with mean binary cross-entropy. Training is fully
//! deterministic given the spec, the data and [`TrainConfig::seed`].

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod ops;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, Tensor};
pub use layers::{bidirectional_pass, lstm_step, maxpool1d, Conv1d, Dense, Lstm, Padding, Param};
pub use model::{Architecture, ForwardCache, Hyperparams, LearnerSpec, Network};
pub use ops::{bce_loss, dropout, leaky_relu, softmax, Mode};

use crate::rng::{self, Rng};

/// Rows per chunk when predicting, bounding cache memory.
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid learner spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("conv stage {stage}: kernel {kernel} is longer than its input ({length})")]
    KernelTooLong { stage: usize, length: usize, kernel: usize },
    #[error("expected {expected} input columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return bad("adam betas must lie in (0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// A fitted learner. Prediction borrows it immutably and may run concurrently.
#[derive(Debug, Clone)]
pub struct TrainedLearner {
    pub spec: LearnerSpec,
    pub config: TrainConfig,
    network: Network,
    pub adam: AdamState,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
    /// Full-training-set loss before the first update and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainedLearner {
    /// Freshly initialised, untrained learner.
    pub fn untrained(spec: LearnerSpec, config: TrainConfig) -> Result<Self> {
        spec.validate()?;
        let network = Network::init(&spec, &mut rng::seeded(config.seed));
        Ok(Self::from_network(spec, config, network))
    }

    pub(crate) fn from_network(spec: LearnerSpec, config: TrainConfig, network: Network) -> Self {
        Self {
            spec,
            config,
            network,
            adam: AdamState::new(),
            loss_trace: Vec::new(),
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.architecture
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// Softmax probabilities, one row per input row.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut out = Array2::zeros((x.nrows(), self.spec.n_classes));
        // inference never draws from the generator
        let mut scratch = rng::seeded(0);
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + PREDICT_CHUNK).min(x.nrows());
            let (logits, _) = self.network.forward(x.slice(s![start..end, ..]), Mode::Infer, &mut scratch);
            out.slice_mut(s![start..end, ..]).assign(&softmax(logits.view()));
            start = end;
        }
        Ok(out)
    }

    /// Mean BCE of the current parameters over a whole data set.
    pub fn loss(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let probs = self.predict_proba(x)?;
        Ok(bce_loss(probs.view(), targets))
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(NeuralError::DimensionMismatch { expected: self.spec.input_dim, found: x.ncols() });
        }
        Ok(())
    }

    /// Runs `cfg.epochs` more epochs of mini-batch Adam on `(x, targets)`,
    /// continuing from the current parameters and optimizer state.
    pub fn fit(&mut self, x: ArrayView2<f64>, targets: ArrayView2<f64>, cfg: &TrainConfig) -> Result<()> {
        let mut rng = rng::seeded(rng::derive_seed(cfg.seed, &[self.adam.step]));
        self.fit_with(x, targets, cfg, &mut rng)
    }

    fn fit_with(
        &mut self,
        x: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<()> {
        cfg.validate()?;
        self.check_input(x)?;
        if x.nrows() == 0 {
            return Err(NeuralError::EmptyTrainingSet);
        }
        if targets.dim() != (x.nrows(), self.spec.n_classes) {
            return Err(NeuralError::DimensionMismatch { expected: self.spec.n_classes, found: targets.ncols() });
        }
        let n = x.nrows();
        let adam_cfg = cfg.adam();
        self.initial_loss = self.loss(x, targets)?;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
                let xb = x.select(Axis(0), rows);
                let tb = targets.select(Axis(0), rows);
                let (logits, cache) = self.network.forward(xb.view(), Mode::Train, rng);
                let probs = softmax(logits.view());
                let loss = bce_loss(probs.view(), tb.view());
                if !loss.is_finite() {
                    return Err(NeuralError::NonFiniteLoss { epoch, batch });
                }
                let dlogits = ops::softmax_bce_backward(probs.view(), tb.view());
                self.network.zero_grad();
                self.network.backward(cache, dlogits.view());
                adam_step(&mut self.network.params_mut(), &mut self.adam, &adam_cfg);
                epoch_loss += loss * rows.len() as f64;
            }
            self.loss_trace.push(epoch_loss / n as f64);
        }
        self.final_loss = self.loss(x, targets)?;
        if !self.final_loss.is_finite() {
            return Err(NeuralError::NonFiniteLoss { epoch: cfg.epochs, batch: 0 });
        }
        Ok(())
    }
}

/// Builds a learner from `spec` and trains it on `(x, targets)`.
///
/// Weight initialisation, shuffling and dropout all draw from one generator
/// seeded with `cfg.seed`, so equal inputs give bit-identical parameters.
pub fn train(
    spec: &LearnerSpec,
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<TrainedLearner> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let network = Network::init(spec, &mut rng);
    let mut learner = TrainedLearner::from_network(spec.clone(), *cfg, network);
    learner.fit_with(x, targets, cfg, &mut rng)?;
    Ok(learner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ActivityLabel;
    use crate::features::one_hot_encode;

    /// Two Gaussian-free, linearly separable blobs labelled act-1 / act-2.
    fn separable(n: usize) -> (Array2<f64>, Array2<f64>) {
        let mut r = rng::seeded(11);
        use rand::Rng as _;
        let mut x = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let cls = i % 2;
            let cx = if cls == 0 { -1.5 } else { 1.5 };
            x[[i, 0]] = cx + r.random_range(-1.0..1.0);
            x[[i, 1]] = r.random_range(-1.0..1.0);
            labels.push(ActivityLabel::from_index(cls));
        }
        (x, one_hot_encode(&labels).unwrap().0)
    }

    fn accuracy(probs: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let hits = probs
            .rows()
            .into_iter()
            .zip(targets.rows())
            .filter(|(p, t)| {
                let am = crate::metrics::argmax(p.view());
                t[am] == 1.0
            })
            .count();
        hits as f64 / probs.nrows() as f64
    }

    #[test]
    fn ann_separates_toy_data() {
        let (x, t) = separable(200);
        let cfg = TrainConfig { epochs: 50, batch_size: 16, learning_rate: 1e-2, ..TrainConfig::default() };
        let learner = train(&LearnerSpec::new(Architecture::Ann, 2), x.view(), t.view(), &cfg).unwrap();
        assert_eq!(accuracy(&learner.predict_proba(x.view()).unwrap(), &t), 1.0);
        assert!(learner.final_loss <= learner.initial_loss);
        assert_eq!(learner.loss_trace.len(), 50);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (x, t) = separable(60);
        let cfg = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
        for arch in [Architecture::Ann, Architecture::Cnn1d, Architecture::BiLstm, Architecture::LinearSoftmax] {
            let spec = LearnerSpec::new(arch, 2);
            let a = train(&spec, x.view(), t.view(), &cfg).unwrap();
            let b = train(&spec, x.view(), t.view(), &cfg).unwrap();
            assert_eq!(a.network(), b.network(), "{arch}");
            assert_eq!(a.predict_proba(x.view()).unwrap(), b.predict_proba(x.view()).unwrap());
        }
    }

    #[test]
    fn zero_linear_predicts_uniform() {
        let spec = LearnerSpec::new(Architecture::LinearSoftmax, 5);
        let mut learner = TrainedLearner::untrained(spec, TrainConfig::default()).unwrap();
        for p in learner.network_mut().params_mut() {
            p.value.fill(0.0);
        }
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * j) as f64 - 3.0);
        let probs = learner.predict_proba(x.view()).unwrap();
        for v in probs.iter() {
            approx::assert_abs_diff_eq!(*v, 1.0 / 12.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn rows_are_distributions() {
        let x = Array2::from_shape_fn((37, 7), |(i, j)| ((i * 31 + j * 17) % 13) as f64 - 6.0);
        for arch in [Architecture::Ann, Architecture::Cnn1d, Architecture::BiLstm] {
            let learner = TrainedLearner::untrained(LearnerSpec::new(arch, 7), TrainConfig::default()).unwrap();
            let probs = learner.predict_proba(x.view()).unwrap();
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn input_width_checked() {
        let learner =
            TrainedLearner::untrained(LearnerSpec::new(Architecture::Ann, 3), TrainConfig::default()).unwrap();
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            learner.predict_proba(x.view()),
            Err(NeuralError::DimensionMismatch { expected: 3, found: 4 })
        ));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let (mut x, t) = separable(40);
        x[[7, 1]] = f64::NAN;
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let err = train(&LearnerSpec::new(Architecture::Ann, 2), x.view(), t.view(), &cfg).unwrap_err();
        assert!(matches!(err, NeuralError::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
