//! Slow, independent reference implementations. Each is written from the
//! textbook definition with plain loops and shares no code with the library.

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
/// from turning rounding noise into a large ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Cross-correlation of `x[c][t]` with `k[f][c][tap]`, zero padded with
/// `pad_left` on the left, producing `out_len` steps.
#[allow(clippy::needless_range_loop)]
pub fn conv1d(x: &[Vec<f64>], k: &[Vec<Vec<f64>>], bias: &[f64], pad_left: usize, out_len: usize) -> Vec<Vec<f64>> {
    let len = x[0].len() as isize;
    let mut out = vec![vec![0.0; out_len]; k.len()];
    for (f, kf) in k.iter().enumerate() {
        for t in 0..out_len {
            let mut acc = bias[f];
            for (c, kc) in kf.iter().enumerate() {
                for (tap, &w) in kc.iter().enumerate() {
                    let src = t as isize + tap as isize - pad_left as isize;
                    if src >= 0 && src < len {
                        acc += w * x[c][src as usize];
                    }
                }
            }
            out[f][t] = acc;
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM step with gate blocks (i, f, g, o); `w_x[d][4h]`, `w_h[h][4h]`.
pub fn lstm_step(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_x: &[Vec<f64>],
    w_h: &[Vec<f64>],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let mut z = b.to_vec();
    for (j, zj) in z.iter_mut().enumerate() {
        for (d, &xd) in x.iter().enumerate() {
            *zj += xd * w_x[d][j];
        }
        for (k, &hk) in h.iter().enumerate() {
            *zj += hk * w_h[k][j];
        }
    }
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for u in 0..hidden {
        let i = sigmoid(z[u]);
        let f = sigmoid(z[hidden + u]);
        let g = z[2 * hidden + u].tanh();
        let o = sigmoid(z[3 * hidden + u]);
        c_new[u] = f * c[u] + i * g;
        h_new[u] = o * c_new[u].tanh();
    }
    (h_new, c_new)
}

/// Final hidden state over `seq` from zero state.
pub fn lstm_run(seq: &[Vec<f64>], w_x: &[Vec<f64>], w_h: &[Vec<f64>], b: &[f64], reverse: bool) -> Vec<f64> {
    let hidden = w_h.len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let order: Vec<usize> = if reverse { (0..seq.len()).rev().collect() } else { (0..seq.len()).collect() };
    for t in order {
        (h, c) = lstm_step(&seq[t], &h, &c, w_x, w_h, b);
    }
    h
}

/// Scalar Adam trajectory of one weight under a fixed gradient sequence.
pub fn adam_trace(w0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (t, &g) in grads.iter().enumerate() {
        let step = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(step));
        let v_hat = v / (1.0 - b2.powi(step));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(w);
    }
    out
}

/// Eigenvalues of a symmetric 3×3 matrix from its characteristic
/// polynomial (trigonometric solution), descending.
pub fn eig3(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.total_cmp(x));
        return d;
    }
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut bm = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            bm[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = bm[0][0] * (bm[1][1] * bm[2][2] - bm[1][2] * bm[2][1])
        - bm[0][1] * (bm[1][0] * bm[2][2] - bm[1][2] * bm[2][0])
        + bm[0][2] * (bm[1][0] * bm[2][1] - bm[1][1] * bm[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [l1, 3.0 * q - l1 - l3, l3]
}

/// Per-label (tp, fp, fn, tn) by direct counting over samples.
pub fn recount(pred: &[usize], truth: &[usize], label: usize) -> (usize, usize, usize, usize) {
    let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == label && t == label).count();
    let fp = pred.iter().zip(truth).filter(|(&p, &t)| p == label && t != label).count();
    let fn_ = pred.iter().zip(truth).filter(|(&p, &t)| p != label && t == label).count();
    (tp, fp, fn_, pred.len() - tp - fp - fn_)
}
