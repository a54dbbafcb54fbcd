//! Elementwise activations, softmax, binary cross-entropy and dropout.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng as _;

use crate::rng::Rng;

/// Probabilities are clipped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Elementwise `max(slope * x, x)` for `slope` in (0, 1).
pub fn leaky_relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>, slope: f64) -> ndarray::Array<f64, D> {
    x.mapv(|v| leaky_relu_scalar(v, slope))
}

/// Multiplies `grad` in place by the leaky-ReLU derivative at the pre-activation `x`.
pub fn leaky_relu_backward<D: ndarray::Dimension>(
    grad: &mut ndarray::Array<f64, D>,
    x: &ndarray::Array<f64, D>,
    slope: f64,
) {
    Zip::from(grad).and(x).for_each(|g, &v| {
        if v < 0.0 {
            *g *= slope;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean over samples and labels of the binary cross-entropy between
/// probabilities and one-hot targets.
pub fn bce_loss(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
    assert_eq!(probs.dim(), targets.dim(), "bce_loss shape mismatch");
    let n = probs.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    Zip::from(probs).and(targets).for_each(|&p, &t| {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    });
    total / n as f64
}

/// Gradient of [`bce_loss`]`(softmax(z), t)` with respect to the logits `z`,
/// given `probs = softmax(z)`. Clipped probabilities pass no gradient.
pub fn softmax_bce_backward(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / probs.len().max(1) as f64;
    let mut dp = Array2::zeros(probs.raw_dim());
    Zip::from(&mut dp).and(probs).and(targets).for_each(|d, &p, &t| {
        *d = if p > BCE_EPS && p < 1.0 - BCE_EPS { scale * (p - t) / (p * (1.0 - p)) } else { 0.0 };
    });
    let mut dz = Array2::zeros(probs.raw_dim());
    for ((mut dz_row, p_row), dp_row) in dz.rows_mut().into_iter().zip(probs.rows()).zip(dp.rows()) {
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(p, g)| p * g).sum();
        for ((d, &p), &g) in dz_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *d = p * (g - dot);
        }
    }
    dz
}

/// Inverted dropout. In train mode each entry is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; the returned mask
/// holds those per-entry factors. Infer mode (or rate 0) is the identity.
pub fn dropout(x: ArrayView2<f64>, rate: f64, mode: Mode, rng: &mut Rng) -> (Array2<f64>, Option<Array2<f64>>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if mode == Mode::Infer || rate == 0.0 {
        return (x.to_owned(), None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < rate { 0.0 } else { keep });
    (&x * &mask, Some(mask))
}
