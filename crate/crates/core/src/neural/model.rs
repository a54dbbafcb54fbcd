//! Learner specifications and the four network architectures.

use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{apply_mask, maxpool_backward, maxpool_forward, Conv1d, Dense, Lstm, LstmCache, Padding, Param};
use super::ops::{dropout, leaky_relu, leaky_relu_backward, Mode};
use super::NeuralError;
use crate::dataset::N_ACTIVITIES;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Ann,
    Cnn1d,
    #[serde(rename = "bilstm")]
    BiLstm,
    #[serde(rename = "linear")]
    LinearSoftmax,
}

impl Architecture {
    /// The three architectures every client trains by default.
    pub const STANDARD: [Architecture; 3] = [Architecture::Ann, Architecture::Cnn1d, Architecture::BiLstm];
    pub const ALL: [Architecture; 4] =
        [Architecture::Ann, Architecture::Cnn1d, Architecture::BiLstm, Architecture::LinearSoftmax];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Ann => "ann",
            Architecture::Cnn1d => "cnn1d",
            Architecture::BiLstm => "bilstm",
            Architecture::LinearSoftmax => "linear",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::Ann => "ANN",
            Architecture::Cnn1d => "CNN",
            Architecture::BiLstm => "Bi-LSTM",
            Architecture::LinearSoftmax => "Linear",
        }
    }

    /// Stable small integer used when deriving seeds.
    pub fn stream_id(self) -> u64 {
        match self {
            Architecture::Ann => 1,
            Architecture::Cnn1d => 2,
            Architecture::BiLstm => 3,
            Architecture::LinearSoftmax => 4,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hyperparams {
    Ann {
        hidden: usize,
        slope: f64,
    },
    Cnn1d {
        filters: Vec<usize>,
        kernel: usize,
        pool: usize,
        slope: f64,
        padding: Padding,
    },
    /// `projection` is the width of the per-step leaky input projection.
    BiLstm {
        projection: usize,
        hidden: usize,
        slope: f64,
        dropout: f64,
    },
    LinearSoftmax,
}

impl Hyperparams {
    pub fn default_for(arch: Architecture) -> Self {
        match arch {
            Architecture::Ann => Hyperparams::Ann { hidden: 64, slope: 0.01 },
            Architecture::Cnn1d => Hyperparams::Cnn1d {
                filters: vec![32, 64, 128],
                kernel: 3,
                pool: 2,
                slope: 0.1,
                padding: Padding::Same,
            },
            Architecture::BiLstm => Hyperparams::BiLstm { projection: 16, hidden: 64, slope: 0.01, dropout: 0.5 },
            Architecture::LinearSoftmax => Hyperparams::LinearSoftmax,
        }
    }

    fn architecture(&self) -> Architecture {
        match self {
            Hyperparams::Ann { .. } => Architecture::Ann,
            Hyperparams::Cnn1d { .. } => Architecture::Cnn1d,
            Hyperparams::BiLstm { .. } => Architecture::BiLstm,
            Hyperparams::LinearSoftmax => Architecture::LinearSoftmax,
        }
    }
}

/// What to build: architecture, input width, class count and layer sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub n_classes: usize,
    pub hyperparams: Hyperparams,
}

impl LearnerSpec {
    /// Default layer sizes for `arch` over `input_dim` features and 12 classes.
    pub fn new(architecture: Architecture, input_dim: usize) -> Self {
        Self { architecture, input_dim, n_classes: N_ACTIVITIES, hyperparams: Hyperparams::default_for(architecture) }
    }

    pub fn with_hyperparams(mut self, hyperparams: Hyperparams) -> Self {
        self.hyperparams = hyperparams;
        self
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |msg: String| Err(NeuralError::InvalidSpec(msg));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.hyperparams.architecture() != self.architecture {
            return bad(format!("{} hyperparameters given for {}", self.hyperparams.architecture(), self.architecture));
        }
        let slope_ok = |s: f64| s > 0.0 && s < 1.0;
        match &self.hyperparams {
            Hyperparams::Ann { hidden, slope } => {
                if *hidden == 0 || !slope_ok(*slope) {
                    return bad("ann needs hidden > 0 and slope in (0, 1)".into());
                }
            }
            Hyperparams::Cnn1d { filters, kernel, pool, slope, padding } => {
                if filters.is_empty() || filters.contains(&0) || *kernel == 0 || *pool == 0 || !slope_ok(*slope) {
                    return bad("cnn1d needs nonzero filters, kernel, pool and slope in (0, 1)".into());
                }
                let mut len = self.input_dim;
                for stage in 0..filters.len() {
                    match padding.output_len(len, *kernel) {
                        Some(out) if out > 0 => len = out.div_ceil(*pool),
                        _ => return Err(NeuralError::KernelTooLong { stage, length: len, kernel: *kernel }),
                    }
                }
            }
            Hyperparams::BiLstm { projection, hidden, slope, dropout } => {
                if *projection == 0 || *hidden == 0 || !slope_ok(*slope) || !(0.0..1.0).contains(dropout) {
                    return bad("bilstm needs positive widths, slope in (0, 1) and dropout in [0, 1)".into());
                }
            }
            Hyperparams::LinearSoftmax => {}
        }
        Ok(())
    }
}

/// Parameters of one architecture, with forward and backward passes that
/// map `[B, input_dim]` rows to `[B, n_classes]` logits.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Network {
    Ann { hidden: Dense, out: Dense, slope: f64 },
    Cnn1d { convs: Vec<Conv1d>, out: Dense, slope: f64, pool: usize },
    BiLstm { proj: Dense, fwd: Lstm, bwd: Lstm, out: Dense, slope: f64, dropout: f64 },
    LinearSoftmax { out: Dense },
}

#[derive(Debug, Clone)]
pub struct CnnStage {
    input_len: usize,
    cols: Array2<f64>,
    pre: Array3<f64>,
    argmax: Vec<usize>,
}

/// Intermediate values from [`Network::forward`] needed by the backward pass.
#[derive(Debug, Clone)]
pub enum ForwardCache {
    Ann {
        x: Array2<f64>,
        pre: Array2<f64>,
        act: Array2<f64>,
    },
    Cnn1d {
        stages: Vec<CnnStage>,
        flat: Array2<f64>,
        last_shape: (usize, usize, usize),
    },
    BiLstm {
        x_flat: Array2<f64>,
        pre: Array2<f64>,
        seq_len: usize,
        fwd: LstmCache,
        bwd: LstmCache,
        dropped: Array2<f64>,
        mask: Option<Array2<f64>>,
    },
    LinearSoftmax {
        x: Array2<f64>,
    },
}

impl Network {
    /// Fresh Glorot-initialised parameters. The spec must already be valid.
    pub fn init(spec: &LearnerSpec, rng: &mut Rng) -> Self {
        let n = spec.input_dim;
        let k = spec.n_classes;
        match &spec.hyperparams {
            Hyperparams::Ann { hidden, slope } => Network::Ann {
                hidden: Dense::new("hidden", n, *hidden, rng),
                out: Dense::new("out", *hidden, k, rng),
                slope: *slope,
            },
            Hyperparams::Cnn1d { filters, kernel, pool, slope, padding } => {
                let mut convs = Vec::with_capacity(filters.len());
                let mut ch = 1;
                let mut len = n;
                for (i, &f) in filters.iter().enumerate() {
                    convs.push(Conv1d::new(&format!("conv{}", i + 1), ch, f, *kernel, *padding, rng));
                    ch = f;
                    len = padding.output_len(len, *kernel).expect("validated spec").div_ceil(*pool);
                }
                Network::Cnn1d { convs, out: Dense::new("out", len * ch, k, rng), slope: *slope, pool: *pool }
            }
            Hyperparams::BiLstm { projection, hidden, slope, dropout } => Network::BiLstm {
                proj: Dense::new("proj", 1, *projection, rng),
                fwd: Lstm::new("fwd", *projection, *hidden, rng),
                bwd: Lstm::new("bwd", *projection, *hidden, rng),
                out: Dense::new("out", 2 * hidden, k, rng),
                slope: *slope,
                dropout: *dropout,
            },
            Hyperparams::LinearSoftmax => Network::LinearSoftmax { out: Dense::new("out", n, k, rng) },
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode, rng: &mut Rng) -> (Array2<f64>, ForwardCache) {
        match self {
            Network::Ann { hidden, out, slope } => {
                let pre = hidden.forward(x);
                let act = leaky_relu(&pre, *slope);
                let logits = out.forward(act.view());
                (logits, ForwardCache::Ann { x: x.to_owned(), pre, act })
            }
            Network::Cnn1d { convs, out, slope, pool } => {
                let batch = x.nrows();
                let mut h = x.to_owned().into_shape_with_order((batch, x.ncols(), 1)).expect("contiguous");
                let mut stages = Vec::with_capacity(convs.len());
                for conv in convs {
                    let input_len = h.dim().1;
                    let (pre, cols) = conv.forward(h.view());
                    let act = leaky_relu(&pre, *slope);
                    let (pooled, argmax) = maxpool_forward(act.view(), *pool);
                    stages.push(CnnStage { input_len, cols, pre, argmax });
                    h = pooled;
                }
                let last_shape = h.dim();
                let flat = h.into_shape_with_order((batch, last_shape.1 * last_shape.2)).expect("contiguous");
                let logits = out.forward(flat.view());
                (logits, ForwardCache::Cnn1d { stages, flat, last_shape })
            }
            Network::BiLstm { proj, fwd, bwd, out, slope, dropout: rate } => {
                let (batch, seq_len) = x.dim();
                let x_flat = x.to_owned().into_shape_with_order((batch * seq_len, 1)).expect("contiguous");
                let pre = proj.forward(x_flat.view());
                let act = leaky_relu(&pre, *slope)
                    .into_shape_with_order((batch, seq_len, proj.w.value.ncols()))
                    .expect("contiguous");
                let (hf, fwd_cache) = fwd.forward(act.view(), false);
                let (hb, bwd_cache) = bwd.forward(act.view(), true);
                let joined = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("same batch");
                let (dropped, mask) = dropout(joined.view(), *rate, mode, rng);
                let logits = out.forward(dropped.view());
                let cache =
                    ForwardCache::BiLstm { x_flat, pre, seq_len, fwd: fwd_cache, bwd: bwd_cache, dropped, mask };
                (logits, cache)
            }
            Network::LinearSoftmax { out } => (out.forward(x), ForwardCache::LinearSoftmax { x: x.to_owned() }),
        }
    }

    /// Accumulates parameter gradients for `dlogits` (gradient of the loss
    /// with respect to the logits of the matching forward call).
    pub fn backward(&mut self, cache: ForwardCache, dlogits: ArrayView2<f64>) {
        match (self, cache) {
            (Network::Ann { hidden, out, slope }, ForwardCache::Ann { x, pre, act }) => {
                let mut d = out.backward(act.view(), dlogits);
                leaky_relu_backward(&mut d, &pre, *slope);
                hidden.backward(x.view(), d.view());
            }
            (Network::Cnn1d { convs, out, slope, .. }, ForwardCache::Cnn1d { stages, flat, last_shape }) => {
                let dflat = out.backward(flat.view(), dlogits);
                let mut dh = dflat.into_shape_with_order(last_shape).expect("contiguous");
                for (conv, stage) in convs.iter_mut().zip(stages).rev() {
                    let mut dact = maxpool_backward(dh.view(), &stage.argmax, stage.pre.dim().1);
                    leaky_relu_backward(&mut dact, &stage.pre, *slope);
                    dh = conv.backward(&stage.cols, stage.input_len, dact.view());
                }
            }
            (
                Network::BiLstm { proj, fwd, bwd, out, slope, .. },
                ForwardCache::BiLstm { x_flat, pre, seq_len, fwd: fc, bwd: bc, dropped, mask },
            ) => {
                let ddrop = out.backward(dropped.view(), dlogits);
                let djoined = apply_mask(ddrop.view(), mask.as_ref());
                let hidden = fwd.hidden();
                let dseq = fwd.backward(&fc, djoined.slice(s![.., ..hidden]))
                    + bwd.backward(&bc, djoined.slice(s![.., hidden..]));
                let batch = dseq.dim().0;
                let mut dpre = dseq.into_shape_with_order((batch * seq_len, pre.ncols())).expect("contiguous");
                leaky_relu_backward(&mut dpre, &pre, *slope);
                proj.backward(x_flat.view(), dpre.view());
            }
            (Network::LinearSoftmax { out }, ForwardCache::LinearSoftmax { x }) => {
                out.backward(x.view(), dlogits);
            }
            _ => panic!("forward cache does not match network architecture"),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Network::Ann { hidden, out, .. } => [hidden.params(), out.params()].concat(),
            Network::Cnn1d { convs, out, .. } => convs.iter().flat_map(Conv1d::params).chain(out.params()).collect(),
            Network::BiLstm { proj, fwd, bwd, out, .. } => {
                [proj.params(), fwd.params(), bwd.params(), out.params()].concat()
            }
            Network::LinearSoftmax { out } => out.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Network::Ann { hidden, out, .. } => {
                let mut v = hidden.params_mut();
                v.extend(out.params_mut());
                v
            }
            Network::Cnn1d { convs, out, .. } => {
                let mut v: Vec<&mut Param> = convs.iter_mut().flat_map(Conv1d::params_mut).collect();
                v.extend(out.params_mut());
                v
            }
            Network::BiLstm { proj, fwd, bwd, out, .. } => {
                let mut v = proj.params_mut();
                v.extend(fwd.params_mut());
                v.extend(bwd.params_mut());
                v.extend(out.params_mut());
                v
            }
            Network::LinearSoftmax { out } => out.params_mut(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
