//! Feature preparation: standardization, PCA with cumulative-variance
//! component selection, stratified train/test splitting and one-hot targets.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActivityLabel, N_ACTIVITIES};
use crate::rng;

/// Jacobi sweep cap.
pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm (relative to the matrix norm) at which Jacobi stops.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Default cumulative explained-variance threshold.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.95;
/// Default held-out fraction.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("PCA needs at least two rows, found {0}")]
    TooFewRows(usize),
    #[error("Jacobi eigensolver did not converge in {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    ConvergenceFailure { sweeps: usize, off_norm: f64 },
    #[error("{label} has {count} rows; stratified splitting needs at least 2")]
    LabelTooSmall { label: ActivityLabel, count: usize },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("label {0} is outside 1..=12")]
    LabelOutOfRange(u8),
    #[error("features have {rows} rows but {labels} labels were given")]
    LengthMismatch { rows: usize, labels: usize },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub means: Array1<f64>,
    pub stds: Array1<f64>,
}

impl StandardizationParams {
    pub fn identity(dim: usize) -> Self {
        Self { means: Array1::zeros(dim), stds: Array1::ones(dim) }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }
}

/// Zero-variance columns get std = 1 so they standardize to zeros.
pub fn fit_standardizer(x: ArrayView2<f64>) -> Result<StandardizationParams> {
    let n = x.nrows();
    if n == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let means = x.mean_axis(Axis(0)).expect("nonempty");
    let mut stds = Array1::zeros(x.ncols());
    for (j, col) in x.columns().into_iter().enumerate() {
        let m = means[j];
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        stds[j] = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    }
    Ok(StandardizationParams { means, stds })
}

pub fn standardize(x: ArrayView2<f64>, p: &StandardizationParams) -> Result<Array2<f64>> {
    if x.ncols() != p.dim() {
        return Err(FeatureError::DimensionMismatch { expected: p.dim(), found: x.ncols() });
    }
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for ((v, m), sd) in row.iter_mut().zip(&p.means).zip(&p.stds) {
            *v = (*v - m) / sd;
        }
    }
    Ok(out)
}

/// Eigendecomposition of a covariance matrix with the selected component count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// d×d, one unit eigenvector per column, sorted by descending eigenvalue.
    pub components: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub explained_ratio: Array1<f64>,
    pub n_selected: usize,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn cumulative_ratio(&self) -> Array1<f64> {
        let mut acc = 0.0;
        self.explained_ratio
            .iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect()
    }
}

/// Population covariance (divides by N) of the columns of `x`.
pub fn covariance(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let means = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &means;
    centered.t().dot(&centered) / n
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues (unsorted) and the matrix whose columns are the
/// matching unit eigenvectors.
pub fn jacobi_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigen needs a square matrix");
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let off_norm = |a: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[[i, j]] * a[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..MAX_SWEEPS {
        if off_norm(&a) <= OFF_DIAGONAL_TOL * scale {
            return Ok((a.diag().to_owned(), v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let off = off_norm(&a);
    if off <= OFF_DIAGONAL_TOL * scale {
        Ok((a.diag().to_owned(), v))
    } else {
        Err(FeatureError::ConvergenceFailure { sweeps: MAX_SWEEPS, off_norm: off })
    }
}

/// Full PCA of an (already standardized) matrix. `n_selected` starts at `d`;
/// call [`select_components`] to apply a variance threshold.
pub fn fit_pca(x: ArrayView2<f64>) -> Result<PcaModel> {
    if x.nrows() < 2 {
        return Err(FeatureError::TooFewRows(x.nrows()));
    }
    let cov = covariance(x);
    let (vals, vecs) = jacobi_eigen(&cov)?;
    let d = vals.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));

    let mut components = Array2::zeros((d, d));
    let mut eigenvalues = Array1::zeros(d);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = vals[src].max(0.0);
        let mut column = vecs.column(src).to_owned();
        let pivot = column.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            column.mapv_inplace(|v| -v);
        }
        components.column_mut(dst).assign(&column);
    }
    let total: f64 = eigenvalues.sum();
    let explained_ratio = if total > 0.0 { &eigenvalues / total } else { Array1::zeros(d) };
    Ok(PcaModel { components, eigenvalues, explained_ratio, n_selected: d })
}

/// Smallest component count whose cumulative explained ratio reaches
/// `threshold`; stored into `m.n_selected`.
pub fn select_components(m: &mut PcaModel, threshold: f64) -> usize {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must lie in (0, 1]");
    let d = m.dim();
    let mut acc = 0.0;
    let mut n = d;
    for (i, r) in m.explained_ratio.iter().enumerate() {
        acc += r;
        // absorbs round-off so that a threshold of 1.0 is reachable
        if acc >= threshold - 1e-12 {
            n = i + 1;
            break;
        }
    }
    m.n_selected = n.max(1);
    m.n_selected
}

/// Projects onto the first `n_selected` components.
pub fn pca_transform(x: ArrayView2<f64>, m: &PcaModel) -> Result<Array2<f64>> {
    if x.ncols() != m.dim() {
        return Err(FeatureError::DimensionMismatch { expected: m.dim(), found: x.ncols() });
    }
    Ok(x.dot(&m.components.slice(s![.., ..m.n_selected])))
}

/// Standardizer plus PCA fitted on one training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub standardizer: StandardizationParams,
    pub pca: PcaModel,
}

impl FeaturePipeline {
    pub fn fit(train_x: ArrayView2<f64>, threshold: f64) -> Result<Self> {
        let standardizer = fit_standardizer(train_x)?;
        let z = standardize(train_x, &standardizer)?;
        let mut pca = fit_pca(z.view())?;
        select_components(&mut pca, threshold);
        Ok(Self { standardizer, pca })
    }

    pub fn output_dim(&self) -> usize {
        self.pca.n_selected
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        pca_transform(standardize(x, &self.standardizer)?.view(), &self.pca)
    }

    /// Projection of rows that were already standardized elsewhere.
    pub fn project_standardized(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        pca_transform(z, &self.pca)
    }
}

/// Train/test partition of one subject's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train_x: Array2<f64>,
    pub train_y: Vec<ActivityLabel>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<ActivityLabel>,
    /// Source row of each train / test row, ascending.
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub split_seed: u64,
    pub test_fraction: f64,
}

impl SplitDataset {
    /// Same partition with both feature blocks replaced (e.g. after PCA).
    pub fn map_features(&self, train_x: Array2<f64>, test_x: Array2<f64>) -> Self {
        assert_eq!(train_x.nrows(), self.train_y.len());
        assert_eq!(test_x.nrows(), self.test_y.len());
        Self { train_x, test_x, ..self.clone() }
    }
}

/// Per-label test counts: each label gets `round(count * fraction)`, then
/// labels are nudged by one (largest rounding loss first, ties to the lower
/// id) until the total equals `round(N * fraction)`. Every label keeps at
/// least one row on each side.
pub fn stratified_test_counts(
    counts: &BTreeMap<ActivityLabel, usize>,
    fraction: f64,
) -> Result<BTreeMap<ActivityLabel, usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(FeatureError::InvalidFraction(fraction));
    }
    for (&label, &count) in counts {
        if count < 2 {
            return Err(FeatureError::LabelTooSmall { label, count });
        }
    }
    let total: usize = counts.values().sum();
    let target = (total as f64 * fraction).round() as i64;
    let mut alloc: BTreeMap<ActivityLabel, usize> =
        counts.iter().map(|(&l, &c)| (l, ((c as f64 * fraction).round() as usize).clamp(1, c - 1))).collect();
    let mut diff = target - alloc.values().sum::<usize>() as i64;
    while diff != 0 {
        // residual = exact share minus current allocation
        let residual = |l: &ActivityLabel| counts[l] as f64 * fraction - alloc[l] as f64;
        let pick = if diff > 0 {
            counts
                .keys()
                .filter(|l| alloc[*l] < counts[*l] - 1)
                .max_by(|a, b| residual(a).total_cmp(&residual(b)).then(b.cmp(a)))
        } else {
            counts.keys().filter(|l| alloc[*l] > 1).min_by(|a, b| residual(a).total_cmp(&residual(b)).then(a.cmp(b)))
        };
        let Some(&label) = pick else { break };
        let slot = alloc.get_mut(&label).expect("label present");
        if diff > 0 {
            *slot += 1;
            diff -= 1;
        } else {
            *slot -= 1;
            diff += 1;
        }
    }
    Ok(alloc)
}

/// Stratified, seeded split.
pub fn train_test_split(
    x: ArrayView2<f64>,
    y: &[ActivityLabel],
    test_fraction: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if x.nrows() != y.len() {
        return Err(FeatureError::LengthMismatch { rows: x.nrows(), labels: y.len() });
    }
    let mut by_label: BTreeMap<ActivityLabel, Vec<usize>> = BTreeMap::new();
    for (i, &l) in y.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let counts = by_label.iter().map(|(&l, rows)| (l, rows.len())).collect();
    let alloc = stratified_test_counts(&counts, test_fraction)?;
    let mut rng = rng::seeded(seed);
    let mut test_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (label, mut rows) in by_label {
        rows.shuffle(&mut rng);
        let k = alloc[&label];
        test_idx.extend_from_slice(&rows[..k]);
        train_idx.extend_from_slice(&rows[k..]);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(SplitDataset {
        train_x: x.select(Axis(0), &train_idx),
        train_y: train_idx.iter().map(|&i| y[i]).collect(),
        test_x: x.select(Axis(0), &test_idx),
        test_y: test_idx.iter().map(|&i| y[i]).collect(),
        train_idx,
        test_idx,
        split_seed: seed,
        test_fraction,
    })
}

/// N×12 matrix of one-vs-rest binary targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHotLabels(pub Array2<f64>);

impl OneHotLabels {
    /// Inverse of [`one_hot_encode`]; the hot column of each row.
    pub fn decode(&self) -> Vec<ActivityLabel> {
        self.0
            .rows()
            .into_iter()
            .map(|r| ActivityLabel::from_index(r.iter().position(|&v| v == 1.0).expect("one-hot row")))
            .collect()
    }
}

pub fn one_hot_encode(labels: &[ActivityLabel]) -> Result<OneHotLabels> {
    let mut m = Array2::zeros((labels.len(), N_ACTIVITIES));
    for (i, l) in labels.iter().enumerate() {
        if l.is_null() {
            return Err(FeatureError::LabelOutOfRange(l.id()));
        }
        m[[i, l.index()]] = 1.0;
    }
    Ok(OneHotLabels(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn label(id: u8) -> ActivityLabel {
        ActivityLabel::new(id).unwrap()
    }

    #[test]
    fn standardizer_population_std() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let p = fit_standardizer(x.view()).unwrap();
        assert_abs_diff_eq!(p.means[0], 2.0);
        assert_abs_diff_eq!(p.stds[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.stds[0], 0.8165, epsilon = 1e-4);
        assert_eq!(p.means[1], 5.0);
        assert_eq!(p.stds[1], 1.0);

        let z = standardize(x.view(), &p).unwrap();
        assert_abs_diff_eq!(z[[0, 0]], -1.2247, epsilon = 1e-4);
        assert_abs_diff_eq!(z[[1, 0]], 0.0);
        assert_abs_diff_eq!(z[[2, 0]], 1.2247, epsilon = 1e-4);
        assert!(z.column(1).iter().all(|&v| v == 0.0));

        let q = fit_standardizer(z.view()).unwrap();
        assert_abs_diff_eq!(q.means[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.stds[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn standardizer_errors() {
        let empty = Array2::<f64>::zeros((0, 3));
        assert_eq!(fit_standardizer(empty.view()), Err(FeatureError::EmptyMatrix));
        let p = StandardizationParams::identity(2);
        let x = array![[1.0, 2.0, 3.0]];
        assert!(matches!(standardize(x.view(), &p), Err(FeatureError::DimensionMismatch { .. })));
        let x = array![[0.5, -0.5]];
        assert_eq!(standardize(x.view(), &p).unwrap(), x);
    }

    #[test]
    fn pca_rank_one() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let z = standardize(x.view(), &fit_standardizer(x.view()).unwrap()).unwrap();
        let mut m = fit_pca(z.view()).unwrap();
        assert_abs_diff_eq!(m.explained_ratio[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.explained_ratio[1], 0.0, epsilon = 1e-12);
        m.n_selected = 1;
        let p = pca_transform(z.view(), &m).unwrap();
        assert_eq!(p.ncols(), 1);
        let var = p.column(0).iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(var, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn select_components_rule() {
        let mut m = PcaModel {
            components: Array2::eye(3),
            eigenvalues: array![6.0, 3.0, 1.0],
            explained_ratio: array![0.6, 0.3, 0.1],
            n_selected: 3,
        };
        assert_eq!(select_components(&mut m, 0.9), 2);
        assert_eq!(m.n_selected, 2);
        assert_eq!(select_components(&mut m, 1.0), 3);
        assert_eq!(select_components(&mut m, 0.5), 1);
    }

    #[test]
    fn identity_projection() {
        let m = PcaModel {
            components: Array2::eye(3),
            eigenvalues: array![1.0, 1.0, 1.0],
            explained_ratio: array![1.0, 1.0, 1.0] / 3.0,
            n_selected: 3,
        };
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(pca_transform(x.view(), &m).unwrap(), x);
        assert!(pca_transform(array![[1.0, 2.0]].view(), &m).is_err());
    }

    #[test]
    fn pca_needs_two_rows() {
        assert_eq!(fit_pca(array![[1.0, 2.0]].view()), Err(FeatureError::TooFewRows(1)));
    }

    #[test]
    fn sign_convention() {
        let x = array![[2.0, -1.0, 0.3], [-1.0, 3.0, 0.1], [0.5, 0.5, -2.0], [1.5, -2.0, 1.0], [0.0, 1.0, 0.2]];
        let m = fit_pca(x.view()).unwrap();
        for c in m.components.columns() {
            let pivot = c.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn split_sizes_from_reference_counts() {
        // subject 1 reference distribution: ten labels at 3072, act-8 3379, act-12 1075
        let mut counts = BTreeMap::new();
        for id in 1..=12u8 {
            counts.insert(label(id), 3072);
        }
        counts.insert(label(8), 3379);
        counts.insert(label(12), 1075);
        let alloc = stratified_test_counts(&counts, 0.2).unwrap();
        assert_eq!(alloc.values().sum::<usize>(), 7035);
        for (l, &k) in &alloc {
            let exact = counts[l] as f64 * 0.2;
            assert!((k as f64 - exact).abs() <= 1.0, "{l}: {k} vs {exact}");
        }
    }

    #[test]
    fn split_errors() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = vec![label(1), label(1), label(2)];
        assert!(matches!(train_test_split(x.view(), &y, 0.5, 1), Err(FeatureError::LabelTooSmall { .. })));
        let y = vec![label(1); 3];
        assert_eq!(train_test_split(x.view(), &y, 1.0, 1), Err(FeatureError::InvalidFraction(1.0)));
    }

    #[test]
    fn one_hot() {
        let oh = one_hot_encode(&[label(3), label(12)]).unwrap();
        let mut e3 = vec![0.0; 12];
        e3[2] = 1.0;
        assert_eq!(oh.0.row(0).to_vec(), e3);
        assert_eq!(oh.0[[1, 11]], 1.0);
        assert_eq!(oh.0.row(1).sum(), 1.0);
        assert_eq!(one_hot_encode(&[ActivityLabel::NULL]), Err(FeatureError::LabelOutOfRange(0)));
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(ids in proptest::collection::vec(1u8..=12, 0..40)) {
            let labels: Vec<_> = ids.iter().map(|&i| label(i)).collect();
            let oh = one_hot_encode(&labels).unwrap();
            for r in oh.0.rows() {
                prop_assert_eq!(r.sum(), 1.0);
            }
            prop_assert_eq!(oh.decode(), labels);
        }

        #[test]
        fn split_is_deterministic_partition(
            ids in proptest::collection::vec(1u8..=4, 20..120),
            seed in any::<u64>(),
        ) {
            let mut ids = ids;
            // every present label needs two rows
            ids.extend_from_slice(&[1, 1, 2, 2, 3, 3, 4, 4]);
            let y: Vec<_> = ids.iter().map(|&i| label(i)).collect();
            let x = Array2::from_shape_fn((y.len(), 2), |(i, j)| (i * 2 + j) as f64);
            let a = train_test_split(x.view(), &y, 0.2, seed).unwrap();
            let b = train_test_split(x.view(), &y, 0.2, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let mut all: Vec<usize> = a.train_idx.iter().chain(&a.test_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
            prop_assert_eq!(a.test_idx.len(), (y.len() as f64 * 0.2).round() as usize);
            for l in 1..=4u8 {
                let total = y.iter().filter(|v| v.id() == l).count() as f64;
                let in_test = a.test_y.iter().filter(|v| v.id() == l).count() as f64;
                prop_assert!((in_test - total * 0.2).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
