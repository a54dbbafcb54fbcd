//! Seeded MHEALTH-shaped recordings for tests and smoke runs when the real
//! logs are not available. Each activity has a fixed mean pattern over the
//! 21 sensor axes, each subject adds its own offset, and rows carry Gaussian
//! noise. Activities are recorded in contiguous blocks separated by
//! unlabeled stretches, as in the real logs.

use std::io::{self, Write};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ActivityLabel, SubjectRecording, ECG_COLUMNS, N_ACTIVITIES, N_FEATURES, RAW_SIGNALS};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub rows_per_label: usize,
    /// Unlabeled rows written before each activity block.
    pub null_rows: usize,
    pub noise: f64,
    /// Scale of the per-subject offset added to every axis.
    pub subject_shift: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// A few dozen rows per activity; enough for the pipeline and quick training.
    pub fn small() -> Self {
        Self { rows_per_label: 30, null_rows: 5, noise: 0.6, subject_shift: 0.4, seed: 7 }
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { rows_per_label: 200, null_rows: 40, ..Self::small() }
    }
}

/// Stream id of the activity mean patterns; shared by every subject.
const PATTERN_STREAM: u64 = 0xAC71;

/// Per-activity mean over the sensor axes, uniform in [-2, 2] per axis.
fn activity_means() -> Array2<f64> {
    let mut rng = seeded(derive_seed(PATTERN_STREAM, &[]));
    Array2::from_shape_simple_fn((N_ACTIVITIES, N_FEATURES), || rng.random_range(-2.0..2.0))
}

pub fn synthetic_subject(subject_id: u32, cfg: &SyntheticConfig) -> SubjectRecording {
    let mut rng = seeded(derive_seed(cfg.seed, &[u64::from(subject_id)]));
    let noise = Normal::new(0.0, cfg.noise).expect("noise must be finite and non-negative");
    let offset: Vec<f64> =
        (0..N_FEATURES).map(|j| cfg.subject_shift * (f64::from(subject_id) * 0.9 + j as f64).cos()).collect();
    let means = activity_means();
    let n = N_ACTIVITIES * (cfg.rows_per_label + cfg.null_rows);
    let mut features = Array2::zeros((n, N_FEATURES));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for k in 0..N_ACTIVITIES {
        for _ in 0..cfg.null_rows {
            for j in 0..N_FEATURES {
                features[[row, j]] = offset[j] + 2.0 * noise.sample(&mut rng);
            }
            labels.push(ActivityLabel::NULL);
            row += 1;
        }
        for _ in 0..cfg.rows_per_label {
            for j in 0..N_FEATURES {
                features[[row, j]] = means[[k, j]] + offset[j] + noise.sample(&mut rng);
            }
            labels.push(ActivityLabel::from_index(k));
            row += 1;
        }
    }
    SubjectRecording::new(subject_id, features, labels).expect("shapes agree")
}

/// Writes `rec` in the raw log layout: 23 tab-separated signals (zeros in
/// the two ECG slots) followed by the label.
pub fn write_subject_log(rec: &SubjectRecording, mut out: impl Write) -> io::Result<()> {
    for (i, label) in rec.labels.iter().enumerate() {
        let mut features = rec.features.row(i).into_iter();
        let mut fields = Vec::with_capacity(RAW_SIGNALS + 1);
        for j in 0..RAW_SIGNALS {
            if ECG_COLUMNS.contains(&j) {
                fields.push("0".to_string());
            } else {
                fields.push(features.next().expect("21 sensor values").to_string());
            }
        }
        fields.push(label.id().to_string());
        writeln!(out, "{}", fields.join("\t"))?;
    }
    Ok(())
}
