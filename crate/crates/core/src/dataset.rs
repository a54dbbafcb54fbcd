//! MHEALTH subject logs: parsing, null-activity filtering, label
//! distributions and per-sensor column slices.
//!
//! A raw log line holds 24 whitespace-separated fields: 23 signals followed
//! by the activity label. Columns 4 and 5 (1-based) are the two ECG leads and
//! are dropped on parse, leaving the 21-column sensor matrix described by
//! [`SENSOR_COLUMNS`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis as NdAxis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of signal fields in a raw log line (label excluded).
pub const RAW_SIGNALS: usize = 23;
/// Number of retained sensor features per row.
pub const N_FEATURES: usize = 21;
/// Number of labelled activities.
pub const N_ACTIVITIES: usize = 12;
/// 0-based positions of the ECG leads in a raw log line.
pub const ECG_COLUMNS: [usize; 2] = [3, 4];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("{0}: file holds no data rows")]
    EmptyFile(PathBuf),
    #[error("activity label {0} is outside 1..=12")]
    LabelOutOfRange(i64),
    #[error("features have {rows} rows but {labels} labels were given")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("expected {expected} feature columns, found {found}")]
    ColumnMismatch { expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorGroup {
    Chest,
    LeftAnkle,
    RightWrist,
}

impl SensorGroup {
    pub const ALL: [SensorGroup; 3] = [SensorGroup::Chest, SensorGroup::LeftAnkle, SensorGroup::RightWrist];

    fn prefix(self) -> &'static str {
        match self {
            SensorGroup::Chest => "C",
            SensorGroup::LeftAnkle => "LA",
            SensorGroup::RightWrist => "RLA",
        }
    }

    /// Short lowercase tag used in file names and CLI flags.
    pub fn tag(self) -> &'static str {
        match self {
            SensorGroup::Chest => "chest",
            SensorGroup::LeftAnkle => "left-ankle",
            SensorGroup::RightWrist => "right-wrist",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }

    /// Columns of the 21-feature matrix produced by this sensor.
    pub fn columns(self) -> impl Iterator<Item = &'static SensorColumn> {
        SENSOR_COLUMNS.iter().filter(move |c| c.group == self)
    }
}

impl fmt::Display for SensorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Acceleration,
    Gyroscope,
    Magnetometer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// One column of the cleaned 21-feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorColumn {
    pub index: usize,
    pub group: SensorGroup,
    pub modality: Modality,
    pub axis: Axis,
}

impl SensorColumn {
    /// Header name, e.g. `C_Sen_AX` or `RLA_Sen_GY`.
    pub fn name(&self) -> String {
        let m = match self.modality {
            Modality::Acceleration => 'A',
            Modality::Gyroscope => 'G',
            Modality::Magnetometer => 'M',
        };
        let a = match self.axis {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        };
        format!("{}_Sen_{}{}", self.group.prefix(), m, a)
    }
}

const fn col(index: usize, group: SensorGroup, modality: Modality, axis: Axis) -> SensorColumn {
    SensorColumn { index, group, modality, axis }
}

use Axis::{X, Y, Z};
use Modality::{Acceleration as Acc, Gyroscope as Gyr, Magnetometer as Mag};
use SensorGroup::{Chest, LeftAnkle, RightWrist};

/// Column catalog of the cleaned feature matrix, in matrix order.
pub const SENSOR_COLUMNS: [SensorColumn; N_FEATURES] = [
    col(0, Chest, Acc, X),
    col(1, Chest, Acc, Y),
    col(2, Chest, Acc, Z),
    col(3, LeftAnkle, Acc, X),
    col(4, LeftAnkle, Acc, Y),
    col(5, LeftAnkle, Acc, Z),
    col(6, LeftAnkle, Gyr, X),
    col(7, LeftAnkle, Gyr, Y),
    col(8, LeftAnkle, Gyr, Z),
    col(9, LeftAnkle, Mag, X),
    col(10, LeftAnkle, Mag, Y),
    col(11, LeftAnkle, Mag, Z),
    col(12, RightWrist, Acc, X),
    col(13, RightWrist, Acc, Y),
    col(14, RightWrist, Acc, Z),
    col(15, RightWrist, Gyr, X),
    col(16, RightWrist, Gyr, Y),
    col(17, RightWrist, Gyr, Z),
    col(18, RightWrist, Mag, X),
    col(19, RightWrist, Mag, Y),
    col(20, RightWrist, Mag, Z),
];

const ACTIVITY_NAMES: [&str; N_ACTIVITIES] = [
    "Standing still",
    "Sitting and relaxing",
    "Lying down",
    "Walking",
    "Climbing stairs",
    "Waist bends forward",
    "Frontal elevation of arms",
    "Knees bending (crouching)",
    "Cycling",
    "Jogging",
    "Running",
    "Jump front & back",
];

/// Activity id in `1..=12`. Raw logs use 0 for the null activity; parsed
/// recordings carry it as [`ActivityLabel::NULL`] until filtered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivityLabel(u8);

impl ActivityLabel {
    pub const NULL: ActivityLabel = ActivityLabel(0);

    pub fn new(id: u8) -> Result<Self> {
        if (1..=N_ACTIVITIES as u8).contains(&id) {
            Ok(Self(id))
        } else {
            Err(DatasetError::LabelOutOfRange(id as i64))
        }
    }

    /// All twelve real activities in id order.
    pub fn all() -> impl Iterator<Item = ActivityLabel> {
        (1..=N_ACTIVITIES as u8).map(ActivityLabel)
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < N_ACTIVITIES, "activity index {index} out of range");
        Self(index as u8 + 1)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    /// Zero-based column in a one-hot or probability row. Panics on the null label.
    pub fn index(self) -> usize {
        assert!(!self.is_null(), "null activity has no class index");
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        if self.is_null() {
            "Null activity"
        } else {
            ACTIVITY_NAMES[self.index()]
        }
    }

    /// Short tag such as `act-7`.
    pub fn tag(self) -> String {
        format!("act-{}", self.0)
    }
}

impl fmt::Display for ActivityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "act-{}", self.0)
    }
}

/// One subject's sensor matrix and per-row activity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecording {
    pub subject_id: u32,
    pub features: Array2<f64>,
    pub labels: Vec<ActivityLabel>,
    /// Sensor columns backing each feature column, in order.
    pub columns: Vec<SensorColumn>,
}

impl SubjectRecording {
    pub fn new(subject_id: u32, features: Array2<f64>, labels: Vec<ActivityLabel>) -> Result<Self> {
        Self::with_columns(subject_id, features, labels, SENSOR_COLUMNS.to_vec())
    }

    pub fn with_columns(
        subject_id: u32,
        features: Array2<f64>,
        labels: Vec<ActivityLabel>,
        columns: Vec<SensorColumn>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(DatasetError::LengthMismatch { rows: features.nrows(), labels: labels.len() });
        }
        if features.ncols() != columns.len() {
            return Err(DatasetError::ColumnMismatch { expected: columns.len(), found: features.ncols() });
        }
        Ok(Self { subject_id, features, labels, columns })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_null_rows(&self) -> bool {
        self.labels.iter().any(|l| l.is_null())
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(SensorColumn::name).collect()
    }
}

/// Conventional file name of a subject log.
pub fn subject_log_name(subject_id: u32) -> String {
    format!("mHealth_subject{subject_id}.log")
}

pub fn parse_subject_log(path: impl AsRef<Path>, subject_id: u32) -> Result<SubjectRecording> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
    parse_subject_reader(file, subject_id).map_err(|e| match e {
        DatasetError::EmptyFile(_) => DatasetError::EmptyFile(path.to_owned()),
        other => other,
    })
}

/// Parses log text from any reader. Blank lines are skipped; any run of
/// spaces or tabs separates fields.
pub fn parse_subject_reader(reader: impl Read, subject_id: u32) -> Result<SubjectRecording> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DatasetError::MalformedRow { line: lineno, reason: e.to_string() })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != RAW_SIGNALS + 1 {
            return Err(DatasetError::MalformedRow {
                line: lineno,
                reason: format!("expected {} fields, found {}", RAW_SIGNALS + 1, fields.len()),
            });
        }
        for (j, field) in fields[..RAW_SIGNALS].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DatasetError::MalformedRow {
                line: lineno,
                reason: format!("field {} is not numeric: {field:?}", j + 1),
            })?;
            if !ECG_COLUMNS.contains(&j) {
                data.push(v);
            }
        }
        let raw_label = fields[RAW_SIGNALS];
        let label: f64 = raw_label.parse().map_err(|_| DatasetError::MalformedRow {
            line: lineno,
            reason: format!("label is not numeric: {raw_label:?}"),
        })?;
        if label.fract() != 0.0 || !(0.0..=N_ACTIVITIES as f64).contains(&label) {
            return Err(DatasetError::MalformedRow {
                line: lineno,
                reason: format!("label {raw_label} outside 0..=12"),
            });
        }
        labels.push(ActivityLabel(label as u8));
    }
    if labels.is_empty() {
        return Err(DatasetError::EmptyFile(PathBuf::from("<reader>")));
    }
    let features = Array2::from_shape_vec((labels.len(), N_FEATURES), data).expect("row width checked above");
    SubjectRecording::new(subject_id, features, labels)
}

/// Drops null-activity rows, preserving the order of the rest.
pub fn filter_null_activity(rec: &SubjectRecording) -> SubjectRecording {
    let keep: Vec<usize> = (0..rec.len()).filter(|&i| !rec.labels[i].is_null()).collect();
    SubjectRecording {
        subject_id: rec.subject_id,
        features: rec.features.select(NdAxis(0), &keep),
        labels: keep.iter().map(|&i| rec.labels[i]).collect(),
        columns: rec.columns.clone(),
    }
}

/// Per-activity row counts of one subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub subject_id: u32,
    pub counts: BTreeMap<ActivityLabel, usize>,
}

impl LabelDistribution {
    pub fn count(&self, label: ActivityLabel) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

pub fn label_distribution(rec: &SubjectRecording) -> LabelDistribution {
    let mut counts: BTreeMap<ActivityLabel, usize> = ActivityLabel::all().map(|l| (l, 0)).collect();
    for &l in &rec.labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    LabelDistribution { subject_id: rec.subject_id, counts }
}

/// Restricts a recording to the columns of one sensor.
pub fn sensor_slice(rec: &SubjectRecording, group: SensorGroup) -> SubjectRecording {
    let positions: Vec<usize> =
        rec.columns.iter().enumerate().filter(|(_, c)| c.group == group).map(|(i, _)| i).collect();
    SubjectRecording {
        subject_id: rec.subject_id,
        features: rec.features.select(NdAxis(1), &positions),
        labels: rec.labels.clone(),
        columns: positions.iter().map(|&i| rec.columns[i]).collect(),
    }
}

/// Writes the cleaned recording as CSV: one header row of column names plus
/// `label`, then one row per sample. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_csv(rec: &SubjectRecording, mut out: impl Write) -> std::io::Result<()> {
    let mut header = rec.column_names();
    header.push("label".into());
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for (row, label) in rec.features.rows().into_iter().zip(&rec.labels) {
        line.clear();
        for v in row {
            line.push_str(&v.to_string());
            line.push(',');
        }
        line.push_str(&label.id().to_string());
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a CSV written by [`write_csv`].
pub fn read_csv(reader: impl Read, subject_id: u32) -> Result<SubjectRecording> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| DatasetError::Csv(e.to_string()))?,
        None => return Err(DatasetError::EmptyFile(PathBuf::from("<csv>"))),
    };
    let names: Vec<&str> = header.trim().split(',').collect();
    if names.last() != Some(&"label") {
        return Err(DatasetError::Csv("last header column must be `label`".into()));
    }
    let columns = names[..names.len() - 1]
        .iter()
        .map(|n| {
            SENSOR_COLUMNS
                .iter()
                .find(|c| c.name() == *n)
                .copied()
                .ok_or_else(|| DatasetError::Csv(format!("unknown column {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let width = columns.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DatasetError::Csv(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != width + 1 {
            return Err(DatasetError::MalformedRow { line: i + 2, reason: format!("expected {} fields", width + 1) });
        }
        for f in &fields[..width] {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| DatasetError::MalformedRow { line: i + 2, reason: format!("not numeric: {f:?}") })?,
            );
        }
        let id: u8 = fields[width]
            .parse()
            .map_err(|_| DatasetError::MalformedRow { line: i + 2, reason: "bad label".into() })?;
        labels.push(if id == 0 { ActivityLabel::NULL } else { ActivityLabel::new(id)? });
    }
    let features = Array2::from_shape_vec((labels.len(), width), data).expect("row width checked above");
    SubjectRecording::with_columns(subject_id, features, labels, columns)
}

/// Loads and cleans every subject log found under `dir`, sorted by subject id.
pub fn load_subjects(dir: impl AsRef<Path>, subjects: &[u32]) -> Result<Vec<SubjectRecording>> {
    let dir = dir.as_ref();
    subjects
        .iter()
        .map(|&id| parse_subject_log(dir.join(subject_log_name(id)), id).map(|r| filter_null_activity(&r)))
        .collect()
}

/// Subject ids whose log files exist under `dir`.
pub fn discover_subjects(dir: impl AsRef<Path>) -> Result<Vec<u32>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io { path: dir.to_owned(), source })?;
    let mut ids: Vec<u32> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("mHealth_subject")?.strip_suffix(".log")?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    Ok(ids)
}
