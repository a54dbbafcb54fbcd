//! Self-contained numeric checks returning a description of the first
//! failure. Shared by the integration tests and the acceptance harness.

use std::collections::BTreeMap;

use fedstack::dataset::{ActivityLabel, N_ACTIVITIES};
use fedstack::features::{jacobi_eigen, stratified_test_counts, train_test_split};
use fedstack::metrics::{confusion_from_predictions, MetricsReport, Provenance};
use fedstack::neural::layers::{maxpool_forward, Conv1d, Dense, Lstm, Padding, Param};
use fedstack::neural::ops::{leaky_relu_backward, softmax_bce_backward};
use fedstack::neural::{
    adam_step, bce_loss, dropout, leaky_relu, softmax, AdamConfig, AdamState, Architecture, Hyperparams, LearnerSpec,
    Mode, Network,
};
use fedstack::rng::seeded;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng as _;

use super::oracles::{self, max_rel_err, numeric_grad, GRAD_TOL};

pub type Check = Result<(), String>;

fn random2(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = seeded(seed);
    Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn grad_ok(what: &str, analytic: &[f64], numeric: &[f64]) -> Check {
    let err = max_rel_err(analytic, numeric);
    ensure(err <= GRAD_TOL, || format!("{what}: relative gradient error {err:.3e} > {GRAD_TOL:e}"))
}

/// Compares `param.grad` against central differences of `loss` with the
/// parameter value substituted.
fn param_ok(what: &str, param: &Param, loss: impl Fn(&Array2<f64>) -> f64) -> Check {
    let shape = param.value.raw_dim();
    let flat: Vec<f64> = param.value.iter().copied().collect();
    let numeric = numeric_grad(&flat, |v| loss(&Array2::from_shape_vec(shape, v.to_vec()).unwrap()));
    grad_ok(what, &param.grad.iter().copied().collect::<Vec<_>>(), &numeric)
}

fn weighted_sum<D: ndarray::Dimension>(y: &ndarray::Array<f64, D>, r: &ndarray::Array<f64, D>) -> f64 {
    (y * r).sum()
}

pub fn dense_gradients() -> Check {
    let mut rng = seeded(1);
    let layer = Dense::new("d", 4, 5, &mut rng);
    let x = random2(3, 4, 2);
    let r = random2(3, 5, 3);
    let mut trained = layer.clone();
    let dx = trained.backward(x.view(), r.view());
    let nx = numeric_grad(x.as_slice().unwrap(), |v| {
        weighted_sum(&layer.forward(ArrayView2::from_shape((3, 4), v).unwrap()), &r)
    });
    grad_ok("dense dx", dx.as_slice().unwrap(), &nx)?;
    param_ok("dense w", &trained.w, |w| {
        weighted_sum(&Dense { w: Param::new("w", w.clone()), ..layer.clone() }.forward(x.view()), &r)
    })?;
    param_ok("dense b", &trained.b, |b| {
        weighted_sum(&Dense { b: Param::new("b", b.clone()), ..layer.clone() }.forward(x.view()), &r)
    })
}

fn conv_case(padding: Padding, kernel: usize, seed: u64) -> Check {
    let (batch, len, ch, filters) = (2, 7, 2, 3);
    let mut rng = seeded(seed);
    let mut layer = Conv1d::new("c", ch, filters, kernel, padding, &mut rng);
    layer.b.value = random2(1, filters, seed + 1);
    let x = random3((batch, len, ch), seed + 2);
    let (y, cols) = layer.forward(x.view());
    let out_len = y.dim().1;

    // forward against the nested-loop definition
    let pad_left = match padding {
        Padding::Same => (kernel - 1) / 2,
        Padding::Valid => 0,
    };
    let taps: Vec<Vec<Vec<f64>>> = (0..filters)
        .map(|f| (0..ch).map(|c| (0..kernel).map(|k| layer.w.value[[k * ch + c, f]]).collect()).collect())
        .collect();
    let bias: Vec<f64> = layer.b.value.row(0).to_vec();
    for b in 0..batch {
        let sample: Vec<Vec<f64>> = (0..ch).map(|c| (0..len).map(|t| x[[b, t, c]]).collect()).collect();
        let want = oracles::conv1d(&sample, &taps, &bias, pad_left, out_len);
        for (f, row) in want.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                ensure((y[[b, t, f]] - v).abs() < 1e-12, || format!("conv {padding:?} k={kernel}: output mismatch"))?;
            }
        }
    }

    let r = random3(y.dim(), seed + 3);
    let reference = layer.clone();
    let dx = layer.backward(&cols, len, r.view());
    let nx = numeric_grad(x.as_slice().unwrap(), |v| {
        let xv = ndarray::ArrayView3::from_shape(x.dim(), v).unwrap();
        weighted_sum(&reference.forward(xv).0, &r)
    });
    let what = format!("conv {padding:?} k={kernel}");
    grad_ok(&format!("{what} dx"), dx.as_slice().unwrap(), &nx)?;
    param_ok(&format!("{what} w"), &layer.w, |w| {
        weighted_sum(&Conv1d { w: Param::new("w", w.clone()), ..reference.clone() }.forward(x.view()).0, &r)
    })?;
    param_ok(&format!("{what} b"), &layer.b, |b| {
        weighted_sum(&Conv1d { b: Param::new("b", b.clone()), ..reference.clone() }.forward(x.view()).0, &r)
    })
}

pub fn conv_gradients() -> Check {
    conv_case(Padding::Same, 3, 10)?;
    conv_case(Padding::Same, 4, 20)?;
    conv_case(Padding::Valid, 3, 30)
}

pub fn maxpool_gradients() -> Check {
    // odd length exercises the trailing short window
    let x = random3((2, 5, 3), 40);
    let (y, argmax) = maxpool_forward(x.view(), 2);
    ensure(y.dim() == (2, 3, 3), || format!("maxpool shape {:?}", y.dim()))?;
    let r = random3(y.dim(), 41);
    let dx = fedstack::neural::layers::maxpool_backward(r.view(), &argmax, 5);
    let nx = numeric_grad(x.as_slice().unwrap(), |v| {
        weighted_sum(&maxpool_forward(ndarray::ArrayView3::from_shape(x.dim(), v).unwrap(), 2).0, &r)
    });
    grad_ok("maxpool dx", dx.as_slice().unwrap(), &nx)
}

fn lstm_case(reverse: bool, seed: u64) -> Check {
    let (batch, len, input, hidden) = (2, 4, 3, 3);
    let mut rng = seeded(seed);
    let mut layer = Lstm::new("l", input, hidden, &mut rng);
    let x = random3((batch, len, input), seed + 1);
    let (h, cache) = layer.forward(x.view(), reverse);

    let to_rows = |m: &Array2<f64>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    let (wx, wh, b) = (to_rows(&layer.w_x.value), to_rows(&layer.w_h.value), layer.b.value.row(0).to_vec());
    for s in 0..batch {
        let seq: Vec<Vec<f64>> = (0..len).map(|t| (0..input).map(|d| x[[s, t, d]]).collect()).collect();
        let want = oracles::lstm_run(&seq, &wx, &wh, &b, reverse);
        for (u, &v) in want.iter().enumerate() {
            ensure((h[[s, u]] - v).abs() < 1e-12, || format!("lstm reverse={reverse}: hidden state mismatch"))?;
        }
    }

    let r = random2(batch, hidden, seed + 2);
    let reference = layer.clone();
    let dx = layer.backward(&cache, r.view());
    let nx = numeric_grad(x.as_slice().unwrap(), |v| {
        weighted_sum(&reference.forward(ndarray::ArrayView3::from_shape(x.dim(), v).unwrap(), reverse).0, &r)
    });
    let what = format!("lstm reverse={reverse}");
    grad_ok(&format!("{what} dx"), dx.as_slice().unwrap(), &nx)?;
    let fwd = |l: Lstm| weighted_sum(&l.forward(x.view(), reverse).0, &r);
    param_ok(&format!("{what} w_x"), &layer.w_x, |w| {
        fwd(Lstm { w_x: Param::new("w", w.clone()), ..reference.clone() })
    })?;
    param_ok(&format!("{what} w_h"), &layer.w_h, |w| {
        fwd(Lstm { w_h: Param::new("w", w.clone()), ..reference.clone() })
    })?;
    param_ok(&format!("{what} b"), &layer.b, |w| fwd(Lstm { b: Param::new("b", w.clone()), ..reference.clone() }))
}

pub fn lstm_gradients() -> Check {
    lstm_case(false, 50)?;
    lstm_case(true, 60)
}

pub fn activation_gradients() -> Check {
    let slope = 0.1;
    let x = random2(3, 4, 70);
    let r = random2(3, 4, 71);
    let mut d = r.clone();
    leaky_relu_backward(&mut d, &x, slope);
    let nx = numeric_grad(x.as_slice().unwrap(), |v| {
        weighted_sum(&leaky_relu(&Array2::from_shape_vec((3, 4), v.to_vec()).unwrap(), slope), &r)
    });
    grad_ok("leaky relu", d.as_slice().unwrap(), &nx)?;

    // the same seed reproduces the same mask, so dropout is a fixed linear map
    let (_, mask) = dropout(x.view(), 0.5, Mode::Train, &mut seeded(72));
    let mask = mask.ok_or("dropout returned no mask in train mode")?;
    let nx = numeric_grad(x.as_slice().unwrap(), |v| {
        let xv = ArrayView2::from_shape((3, 4), v).unwrap();
        weighted_sum(&dropout(xv, 0.5, Mode::Train, &mut seeded(72)).0, &r)
    });
    let analytic = fedstack::neural::layers::apply_mask(r.view(), Some(&mask));
    grad_ok("dropout", analytic.as_slice().unwrap(), &nx)?;
    ensure(mask.iter().all(|&m| m == 0.0 || m == 2.0), || "inverted dropout mask must be 0 or 1/(1-rate)".into())?;
    let (y, none) = dropout(x.view(), 0.5, Mode::Infer, &mut seeded(72));
    ensure(none.is_none() && y == x, || "dropout must be the identity at inference".into())?;

    let z = random2(4, N_ACTIVITIES, 73) * 3.0;
    let mut t = Array2::zeros((4, N_ACTIVITIES));
    for i in 0..4 {
        t[[i, (i * 5) % N_ACTIVITIES]] = 1.0;
    }
    let dz = softmax_bce_backward(softmax(z.view()).view(), t.view());
    let nz = numeric_grad(z.as_slice().unwrap(), |v| {
        bce_loss(softmax(ArrayView2::from_shape(z.dim(), v).unwrap()).view(), t.view())
    });
    grad_ok("softmax + bce", dz.as_slice().unwrap(), &nz)
}

fn small_spec(arch: Architecture) -> LearnerSpec {
    let (input, hp) = match arch {
        Architecture::Ann => (6, Hyperparams::Ann { hidden: 5, slope: 0.01 }),
        Architecture::Cnn1d => {
            (7, Hyperparams::Cnn1d { filters: vec![3, 4], kernel: 3, pool: 2, slope: 0.1, padding: Padding::Same })
        }
        Architecture::BiLstm => (5, Hyperparams::BiLstm { projection: 3, hidden: 3, slope: 0.01, dropout: 0.5 }),
        Architecture::LinearSoftmax => (6, Hyperparams::LinearSoftmax),
    };
    LearnerSpec { n_classes: 4, ..LearnerSpec::new(arch, input) }.with_hyperparams(hp)
}

/// Every parameter gradient of a whole network in train mode (dropout
/// included) against central differences of `sum(logits * R)`.
pub fn network_gradients(arch: Architecture) -> Check {
    let spec = small_spec(arch);
    let reference = Network::init(&spec, &mut seeded(80));
    let x = random2(3, spec.input_dim, 81);
    let r = random2(3, spec.n_classes, 82);
    let mask_seed = 83;
    let mut net = reference.clone();
    net.zero_grad();
    let (_, cache) = net.forward(x.view(), Mode::Train, &mut seeded(mask_seed));
    net.backward(cache, r.view());
    for (pi, param) in net.params().iter().enumerate() {
        param_ok(&format!("{arch} {}", param.name), param, |value| {
            let mut probe = reference.clone();
            probe.params_mut()[pi].value = value.clone();
            weighted_sum(&probe.forward(x.view(), Mode::Train, &mut seeded(mask_seed)).0, &r)
        })?;
    }
    Ok(())
}

pub fn all_network_gradients() -> Check {
    Architecture::ALL.iter().try_for_each(|&a| network_gradients(a))
}

pub fn adam_matches_scalar_trace() -> Check {
    let cfg = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
    let grads: Vec<f64> = (0..25).map(|i| ((i as f64) * 0.7).sin() * (1.0 + i as f64 / 10.0)).collect();
    let want = oracles::adam_trace(0.3, &grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut p = Param::new("p", Array2::from_elem((1, 1), 0.3));
    let mut state = AdamState::new();
    for (step, (&g, &w)) in grads.iter().zip(&want).enumerate() {
        p.grad[[0, 0]] = g;
        adam_step(&mut [&mut p], &mut state, &cfg);
        let got = p.value[[0, 0]];
        ensure((got - w).abs() < 1e-14, || format!("adam step {}: {got} != {w}", step + 1))?;
    }
    Ok(())
}

pub fn jacobi_matches_closed_form() -> Check {
    for seed in 0..20 {
        let m = random2(3, 3, 90 + seed);
        let a = &m + &m.t();
        let (vals, vecs) = jacobi_eigen(&a).map_err(|e| e.to_string())?;
        let mut got = vals.to_vec();
        got.sort_by(|x, y| y.total_cmp(x));
        let arr =
            [[a[[0, 0]], a[[0, 1]], a[[0, 2]]], [a[[1, 0]], a[[1, 1]], a[[1, 2]]], [a[[2, 0]], a[[2, 1]], a[[2, 2]]]];
        let want = oracles::eig3(arr);
        for (g, w) in got.iter().zip(want) {
            ensure((g - w).abs() < 1e-9, || format!("jacobi eigenvalue {g} != closed form {w}"))?;
        }
        // A v = lambda v, V orthonormal
        for k in 0..3 {
            let v: Array1<f64> = vecs.column(k).to_owned();
            let resid = (&a.dot(&v) - &(&v * vals[k])).mapv(f64::abs).sum();
            ensure(resid < 1e-9, || format!("eigenpair residual {resid:e}"))?;
        }
        let gram = vecs.t().dot(&vecs);
        let off = (&gram - &Array2::<f64>::eye(3)).mapv(f64::abs).sum();
        ensure(off < 1e-9, || format!("eigenvectors not orthonormal ({off:e})"))?;
    }
    Ok(())
}

pub fn softmax_is_normalized_and_shift_invariant() -> Check {
    let z = random2(20, N_ACTIVITIES, 100) * 40.0;
    let p = softmax(z.view());
    for row in p.rows() {
        ensure((row.sum() - 1.0).abs() < 1e-12, || format!("softmax row sums to {}", row.sum()))?;
        ensure(row.iter().all(|&v| v >= 0.0), || "negative probability".into())?;
    }
    let shifted = softmax((&z + 123.0).view());
    let diff = (&p - &shifted).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    ensure(diff < 1e-12, || format!("softmax not shift invariant ({diff:e})"))
}

fn labels_for(counts: &[usize]) -> Vec<ActivityLabel> {
    counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(ActivityLabel::from_index(k), n)).collect()
}

pub fn split_is_stratified_and_deterministic() -> Check {
    let counts = [50, 41, 33, 60, 17, 29, 44, 38, 12, 25, 70, 9];
    let y = labels_for(&counts);
    let x = Array2::from_shape_fn((y.len(), 2), |(i, j)| (i * 2 + j) as f64);
    let a = train_test_split(x.view(), &y, 0.2, 5).map_err(|e| e.to_string())?;
    let b = train_test_split(x.view(), &y, 0.2, 5).map_err(|e| e.to_string())?;
    ensure(a.test_idx == b.test_idx && a.train_idx == b.train_idx, || "same seed gave different splits".into())?;
    let c = train_test_split(x.view(), &y, 0.2, 6).map_err(|e| e.to_string())?;
    ensure(a.test_idx != c.test_idx, || "different seeds gave identical splits".into())?;
    let total: usize = counts.iter().sum();
    ensure(a.test_idx.len() == (total as f64 * 0.2).round() as usize, || {
        "test size is not round(N * fraction)".into()
    })?;
    let mut seen = a.train_idx.clone();
    seen.extend(&a.test_idx);
    seen.sort_unstable();
    ensure(seen == (0..total).collect::<Vec<_>>(), || "split is not a partition".into())?;
    for (k, &n) in counts.iter().enumerate() {
        let label = ActivityLabel::from_index(k);
        let got = a.test_y.iter().filter(|&&l| l == label).count();
        ensure(got.abs_diff((n as f64 * 0.2).round() as usize) <= 1, || format!("{label}: {got} test rows of {n}"))?;
    }
    let alloc = stratified_test_counts(
        &counts.iter().enumerate().map(|(k, &n)| (ActivityLabel::from_index(k), n)).collect::<BTreeMap<_, _>>(),
        0.2,
    )
    .map_err(|e| e.to_string())?;
    ensure(alloc.values().sum::<usize>() == a.test_idx.len(), || "allocation and split disagree".into())
}

/// Random class predictions against random truth, recounted per sample.
pub fn confusion_matches_recount(n: usize, seed: u64) -> Check {
    let mut rng = seeded(seed);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..N_ACTIVITIES)).collect();
    let probs = Array2::from_shape_simple_fn((n, N_ACTIVITIES), || rng.random::<f64>());
    let mut onehot = Array2::zeros((n, N_ACTIVITIES));
    for (i, &t) in truth.iter().enumerate() {
        onehot[[i, t]] = 1.0;
    }
    let conf = confusion_from_predictions(probs.view(), onehot.view()).map_err(|e| e.to_string())?;
    let pred: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    for k in 0..N_ACTIVITIES {
        let (tp, fp, fn_, tn) = oracles::recount(&pred, &truth, k);
        let c = conf.per_label[k];
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || {
            format!("label {k}: {c:?} vs recount {:?}", (tp, fp, fn_, tn))
        })?;
    }
    if (0..N_ACTIVITIES).all(|k| conf.per_label[k].support() > 0 && conf.per_label[k].support() < n) {
        let report = MetricsReport::from_confusion(&conf, Provenance::default()).map_err(|e| e.to_string())?;
        for (k, m) in report.per_label.iter().enumerate() {
            let (tp, fp, fn_, tn) = oracles::recount(&pred, &truth, k);
            let ba = (tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64) / 2.0;
            ensure((m.balanced_accuracy - ba).abs() < 1e-12, || {
                format!("label {k}: BA {} vs {ba}", m.balanced_accuracy)
            })?;
        }
    }
    Ok(())
}

/// Macro balanced accuracy of uniform random guesses over 10k rows.
pub fn random_classifier_is_chance() -> Check {
    let n = 10_000;
    let mut rng = seeded(110);
    let probs = Array2::from_shape_simple_fn((n, N_ACTIVITIES), || rng.random::<f64>());
    let mut truth = Array2::zeros((n, N_ACTIVITIES));
    for mut row in truth.axis_iter_mut(Axis(0)) {
        row[rng.random_range(0..N_ACTIVITIES)] = 1.0;
    }
    let report =
        MetricsReport::evaluate(probs.view(), truth.view(), Provenance::default()).map_err(|e| e.to_string())?;
    let ba = report.macro_avg.balanced_accuracy;
    ensure((ba - 0.5).abs() <= 0.05, || format!("random classifier macro BA {ba:.4} outside 0.5 ± 0.05"))
}

/// Row counts of both stacking modes over random client blocks.
pub fn stacking_cardinality() -> Check {
    use fedstack::fedstack::{records_from_probs, stack_heterogeneous, stack_homogeneous};
    let archs = [Architecture::Ann, Architecture::Cnn1d, Architecture::BiLstm];
    let mut rng = seeded(130);
    let blocks: Vec<usize> = (0..4).map(|_| rng.random_range(1..40)).collect();
    let mut records = Vec::new();
    for (c, &n) in blocks.iter().enumerate() {
        let labels: Vec<ActivityLabel> =
            (0..n).map(|_| ActivityLabel::from_index(rng.random_range(0..N_ACTIVITIES))).collect();
        for &arch in &archs {
            let probs = softmax(random2(n, N_ACTIVITIES, rng.random()).view());
            records.extend(records_from_probs(c as u32 + 1, arch, probs.view(), Some(&labels)));
        }
    }
    let total: usize = blocks.iter().sum();
    for arch in archs {
        let homo = stack_homogeneous(&records, arch).map_err(|e| e.to_string())?;
        ensure(homo.len() == total, || format!("{arch} homogeneous stack has {} rows, want {total}", homo.len()))?;
    }
    let hetero = stack_heterogeneous(&records, &archs.into_iter().collect()).map_err(|e| e.to_string())?;
    ensure(hetero.len() == archs.len() * total, || format!("heterogeneous stack has {} rows", hetero.len()))?;
    ensure(hetero.inputs.ncols() == N_ACTIVITIES, || "stacked inputs must be 12 wide".into())
}

/// Every check the property criterion is made of, by name.
pub fn property_suite() -> Vec<(&'static str, Check)> {
    vec![
        ("dense gradients", dense_gradients()),
        ("conv1d gradients and forward oracle", conv_gradients()),
        ("maxpool gradients", maxpool_gradients()),
        ("lstm gradients and forward oracle", lstm_gradients()),
        ("activation, dropout and loss gradients", activation_gradients()),
        ("network gradients", all_network_gradients()),
        ("adam scalar trace", adam_matches_scalar_trace()),
        ("jacobi closed form", jacobi_matches_closed_form()),
        ("softmax normalization", softmax_is_normalized_and_shift_invariant()),
        ("stratified split", split_is_stratified_and_deterministic()),
        ("confusion recount", confusion_matches_recount(2_000, 120)),
        ("random classifier chance level", random_classifier_is_chance()),
        ("stacking cardinality", stacking_cardinality()),
    ]
}
