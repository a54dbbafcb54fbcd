//! Trainable layers with explicit forward caches and backward passes.
//!
//! Sequence activations are laid out channels-last as `[batch, time, channels]`.
//! Every backward pass accumulates into [`Param::grad`]; callers zero the
//! gradients between steps.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ops::sigmoid;
use super::NeuralError;
use crate::rng::Rng;

/// A named weight matrix and its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { name: name.into(), value, grad }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Array2::zeros((rows, cols)))
    }

    /// Glorot-uniform initialisation with the given fan sizes.
    pub fn glorot(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit));
        Self::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w: Param::glorot(format!("{name}.w"), input, output, input, output, rng),
            b: Param::zeros(format!("{name}.b"), 1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + self.b.value.row(0)
    }

    /// `x` is the input seen by the matching forward call.
    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.w.grad += &x.t().dot(&dy);
        self.b.grad.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&self.w.value.t())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output length is `L - K + 1`.
    Valid,
    /// Zero padding so the output length equals the input length.
    Same,
}

impl Padding {
    pub fn output_len(self, len: usize, kernel: usize) -> Option<usize> {
        match self {
            Padding::Valid => len.checked_sub(kernel).map(|v| v + 1),
            Padding::Same => Some(len),
        }
    }

    fn left(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// 1-D cross-correlation layer. Weights are stored as `[kernel * in_channels,
/// filters]`, row `k * in_channels + c` holding tap `k` of channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: Param,
    pub b: Param,
    pub kernel: usize,
    pub in_channels: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(name: &str, in_channels: usize, filters: usize, kernel: usize, padding: Padding, rng: &mut Rng) -> Self {
        Self {
            w: Param::glorot(
                format!("{name}.w"),
                kernel * in_channels,
                filters,
                kernel * in_channels,
                kernel * filters,
                rng,
            ),
            b: Param::zeros(format!("{name}.b"), 1, filters),
            kernel,
            in_channels,
            padding,
        }
    }

    pub fn filters(&self) -> usize {
        self.w.value.ncols()
    }

    /// Unfolds `[B, L, C]` into `[B * L_out, K * C]` patches.
    fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (batch, len, ch) = x.dim();
        let out_len = self.padding.output_len(len, self.kernel).expect("kernel length checked by caller");
        let left = self.padding.left(self.kernel) as isize;
        let mut cols = Array2::zeros((batch * out_len, self.kernel * ch));
        for b in 0..batch {
            for t in 0..out_len {
                let mut row = cols.row_mut(b * out_len + t);
                for k in 0..self.kernel {
                    let src = t as isize + k as isize - left;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    row.slice_mut(s![k * ch..(k + 1) * ch]).assign(&x.slice(s![b, src as usize, ..]));
                }
            }
        }
        cols
    }

    /// Returns the output `[B, L_out, filters]` and the patch matrix for backward.
    pub fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (batch, len, _) = x.dim();
        let out_len = self.padding.output_len(len, self.kernel).expect("kernel length checked by caller");
        let cols = self.im2col(x);
        let y = cols.dot(&self.w.value) + self.b.value.row(0);
        let y = y.into_shape_with_order((batch, out_len, self.filters())).expect("contiguous");
        (y, cols)
    }

    pub fn backward(&mut self, cols: &Array2<f64>, input_len: usize, dy: ArrayView3<f64>) -> Array3<f64> {
        let (batch, out_len, filters) = dy.dim();
        let dy2 = dy.to_owned().into_shape_with_order((batch * out_len, filters)).expect("contiguous");
        self.w.grad += &cols.t().dot(&dy2);
        self.b.grad.row_mut(0).scaled_add(1.0, &dy2.sum_axis(Axis(0)));
        let dcols = dy2.dot(&self.w.value.t());
        let ch = self.in_channels;
        let left = self.padding.left(self.kernel) as isize;
        let mut dx = Array3::zeros((batch, input_len, ch));
        for b in 0..batch {
            for t in 0..out_len {
                let row = dcols.row(b * out_len + t);
                for k in 0..self.kernel {
                    let src = t as isize + k as isize - left;
                    if src < 0 || src >= input_len as isize {
                        continue;
                    }
                    let mut dst = dx.slice_mut(s![b, src as usize, ..]);
                    dst += &row.slice(s![k * ch..(k + 1) * ch]);
                }
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Valid cross-correlation of one `[channels, length]` sample with
/// `kernels: [filters, channels, K]`; returns `[filters, length - K + 1]`.
pub fn conv1d_forward(
    x: ArrayView2<f64>,
    kernels: ArrayView3<f64>,
    bias: ArrayView1<f64>,
) -> Result<Array2<f64>, NeuralError> {
    let (channels, len) = x.dim();
    let (filters, kc, k) = kernels.dim();
    assert_eq!(kc, channels, "kernel channels must match input channels");
    assert_eq!(bias.len(), filters, "one bias per filter");
    if k == 0 || k > len {
        return Err(NeuralError::KernelTooLong { stage: 0, length: len, kernel: k });
    }
    let mut w = Array2::zeros((k * channels, filters));
    for f in 0..filters {
        for c in 0..channels {
            for tap in 0..k {
                w[[tap * channels + c, f]] = kernels[[f, c, tap]];
            }
        }
    }
    let layer = Conv1d {
        w: Param::new("w", w),
        b: Param::new("b", bias.to_owned().insert_axis(Axis(0))),
        kernel: k,
        in_channels: channels,
        padding: Padding::Valid,
    };
    let seq = x.t().insert_axis(Axis(0));
    let (y, _) = layer.forward(seq);
    Ok(y.index_axis(Axis(0), 0).t().to_owned())
}

/// Non-overlapping max pooling over time. A trailing window shorter than
/// `pool` is kept and reduced on its own, so the output length is
/// `ceil(L / pool)`.
pub fn maxpool_forward(x: ArrayView3<f64>, pool: usize) -> (Array3<f64>, Vec<usize>) {
    assert!(pool >= 1, "pool size must be at least 1");
    let (batch, len, ch) = x.dim();
    let out_len = len.div_ceil(pool);
    let mut y = Array3::zeros((batch, out_len, ch));
    let mut argmax = Vec::with_capacity(batch * out_len * ch);
    for b in 0..batch {
        for o in 0..out_len {
            let start = o * pool;
            let end = (start + pool).min(len);
            for c in 0..ch {
                let mut best = start;
                for t in start + 1..end {
                    if x[[b, t, c]] > x[[b, best, c]] {
                        best = t;
                    }
                }
                y[[b, o, c]] = x[[b, best, c]];
                argmax.push(best);
            }
        }
    }
    (y, argmax)
}

pub fn maxpool_backward(dy: ArrayView3<f64>, argmax: &[usize], input_len: usize) -> Array3<f64> {
    let (batch, out_len, ch) = dy.dim();
    let mut dx = Array3::zeros((batch, input_len, ch));
    let mut i = 0;
    for b in 0..batch {
        for o in 0..out_len {
            for c in 0..ch {
                dx[[b, argmax[i], c]] += dy[[b, o, c]];
                i += 1;
            }
        }
    }
    dx
}

/// Single-sample max pooling with the same remainder rule as [`maxpool_forward`].
pub fn maxpool1d(x: ArrayView1<f64>, pool: usize) -> Array1<f64> {
    assert!(pool >= 1, "pool size must be at least 1");
    x.as_slice()
        .map(|v| v.to_vec())
        .unwrap_or_else(|| x.to_vec())
        .chunks(pool)
        .map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// LSTM weights for one direction. Gate blocks are ordered input, forget,
/// cell candidate, output along the `4 * hidden` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_x: Param,
    pub w_h: Param,
    pub b: Param,
}

/// Per-step values kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStepCache>,
    reverse: bool,
    seq_len: usize,
}

impl Lstm {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut b = Param::zeros(format!("{name}.b"), 1, 4 * hidden);
        b.value.slice_mut(s![0, hidden..2 * hidden]).fill(1.0);
        Self {
            w_x: Param::glorot(format!("{name}.w_x"), input, 4 * hidden, input, 4 * hidden, rng),
            w_h: Param::glorot(format!("{name}.w_h"), hidden, 4 * hidden, hidden, 4 * hidden, rng),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.value.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.value.nrows()
    }

    fn gates(&self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let h = self.hidden();
        let i = z.slice(s![.., 0..h]).mapv(sigmoid);
        let f = z.slice(s![.., h..2 * h]).mapv(sigmoid);
        let g = z.slice(s![.., 2 * h..3 * h]).mapv(f64::tanh);
        let o = z.slice(s![.., 3 * h..4 * h]).mapv(sigmoid);
        (i, f, g, o)
    }

    /// Runs a `[B, T, D]` sequence (reversed in time when `reverse`) from zero
    /// state and returns the final hidden state `[B, H]`.
    pub fn forward(&self, x: ArrayView3<f64>, reverse: bool) -> (Array2<f64>, LstmCache) {
        let (batch, len, _) = x.dim();
        let hidden = self.hidden();
        let mut h = Array2::zeros((batch, hidden));
        let mut c = Array2::zeros((batch, hidden));
        let mut steps = Vec::with_capacity(len);
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let xt = x.slice(s![.., t, ..]).to_owned();
            let z = xt.dot(&self.w_x.value) + h.dot(&self.w_h.value) + self.b.value.row(0);
            let (i, f, g, o) = self.gates(&z);
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &o * &tanh_c;
            steps.push(LstmStepCache { x: xt, h_prev: h, c_prev: c, i, f, g, o, tanh_c });
            h = h_new;
            c = c_new;
        }
        (h, LstmCache { steps, reverse, seq_len: len })
    }

    /// Backpropagates a gradient on the final hidden state; returns `dx: [B, T, D]`.
    pub fn backward(&mut self, cache: &LstmCache, dh_final: ArrayView2<f64>) -> Array3<f64> {
        let hidden = self.hidden();
        let batch = dh_final.nrows();
        let mut dx = Array3::zeros((batch, cache.seq_len, self.input_dim()));
        let mut dh = dh_final.to_owned();
        let mut dc = Array2::<f64>::zeros((batch, hidden));
        let mut dz = Array2::<f64>::zeros((batch, 4 * hidden));
        for (step, sc) in cache.steps.iter().enumerate().rev() {
            let t = if cache.reverse { cache.seq_len - 1 - step } else { step };
            let d_o = &dh * &sc.tanh_c;
            dc = dc + &dh * &sc.o * &sc.tanh_c.mapv(|v| 1.0 - v * v);
            let d_i = &dc * &sc.g;
            let d_g = &dc * &sc.i;
            let d_f = &dc * &sc.c_prev;
            dz.slice_mut(s![.., 0..hidden]).assign(&(&d_i * &sc.i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., hidden..2 * hidden]).assign(&(&d_f * &sc.f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * hidden..3 * hidden]).assign(&(&d_g * &sc.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * hidden..4 * hidden]).assign(&(&d_o * &sc.o.mapv(|v| v * (1.0 - v))));
            self.w_x.grad += &sc.x.t().dot(&dz);
            self.w_h.grad += &sc.h_prev.t().dot(&dz);
            self.b.grad.row_mut(0).scaled_add(1.0, &dz.sum_axis(Axis(0)));
            dx.slice_mut(s![.., t, ..]).assign(&dz.dot(&self.w_x.value.t()));
            dh = dz.dot(&self.w_h.value.t());
            dc *= &sc.f;
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_x, &self.w_h, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}

/// One gated update for a single sample: returns `(h_t, c_t)`.
pub fn lstm_step(
    x_t: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
    params: &Lstm,
) -> (Array1<f64>, Array1<f64>) {
    let x = x_t.insert_axis(Axis(0)).to_owned();
    let h = h_prev.insert_axis(Axis(0));
    let c = c_prev.insert_axis(Axis(0));
    let z = x.dot(&params.w_x.value) + h.dot(&params.w_h.value) + params.b.value.row(0);
    let (i, f, g, o) = params.gates(&z);
    let c_new = &f * &c + &i * &g;
    let h_new = &o * &c_new.mapv(f64::tanh);
    (h_new.row(0).to_owned(), c_new.row(0).to_owned())
}

/// Final forward hidden state concatenated with the final backward hidden
/// state for one `[T, D]` sequence.
pub fn bidirectional_pass(x: ArrayView2<f64>, fwd: &Lstm, bwd: &Lstm) -> Array1<f64> {
    assert!(x.nrows() >= 1, "sequence must hold at least one step");
    let seq = x.insert_axis(Axis(0));
    let (hf, _) = fwd.forward(seq, false);
    let (hb, _) = bwd.forward(seq, true);
    ndarray::concatenate(Axis(0), &[hf.row(0), hb.row(0)]).expect("same rank")
}

/// Dropout cache helper: `None` means the layer ran as identity.
pub fn apply_mask(dy: ArrayView2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => &dy * m,
        None => dy.to_owned(),
    }
}
