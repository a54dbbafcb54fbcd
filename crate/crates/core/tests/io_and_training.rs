mod common;

use fedstack::dataset::{
    discover_subjects, label_distribution, load_subjects, parse_subject_log, read_csv, subject_log_name, write_csv,
    ActivityLabel, N_FEATURES,
};
use fedstack::metrics::{MetricsReport, Provenance};
use fedstack::neural::{Architecture, Checkpoint, TrainConfig};
use fedstack::pipeline::{prepare_subject, train_local_model, PipelineConfig};
use fedstack::synthetic::{synthetic_subject, write_subject_log, SyntheticConfig};

#[test]
fn raw_log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig::small();
    for id in [2, 5] {
        let rec = synthetic_subject(id, &cfg);
        let file = std::fs::File::create(dir.path().join(subject_log_name(id))).unwrap();
        write_subject_log(&rec, std::io::BufWriter::new(file)).unwrap();
    }
    assert_eq!(discover_subjects(dir.path()).unwrap(), vec![2, 5]);
    let original = synthetic_subject(5, &cfg);
    let parsed = parse_subject_log(dir.path().join(subject_log_name(5)), 5).unwrap();
    assert_eq!(parsed.features, original.features);
    assert_eq!(parsed.labels, original.labels);

    let loaded = load_subjects(dir.path(), &[2, 5]).unwrap();
    assert_eq!(loaded.len(), 2);
    let dist = label_distribution(&loaded[1]);
    assert_eq!(dist.count(ActivityLabel::NULL), 0);
    for label in ActivityLabel::all() {
        assert_eq!(dist.count(label), cfg.rows_per_label);
    }
    assert_eq!(loaded[1].features.ncols(), N_FEATURES);
}

#[test]
fn csv_round_trip_is_exact() {
    let rec = synthetic_subject(3, &SyntheticConfig::small());
    let mut buf = Vec::new();
    write_csv(&rec, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), 3).unwrap();
    assert_eq!(back.features, rec.features);
    assert_eq!(back.labels, rec.labels);
}

#[test]
fn checkpoint_reproduces_predictions_bit_for_bit() {
    let data = prepare_subject(&synthetic_subject(1, &SyntheticConfig::small()), &PipelineConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let learner = train_local_model(&data, arch, &common::quick_train()).unwrap();
        let path = dir.path().join(format!("{arch}.json"));
        Checkpoint::from_learner(&learner).save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().into_learner().unwrap();
        let a = learner.predict_proba(data.test_x.view()).unwrap();
        let b = restored.predict_proba(data.test_x.view()).unwrap();
        assert_eq!(a, b, "{arch}");
        assert_eq!(restored.loss_trace, learner.loss_trace);
    }
}

#[test]
fn local_models_learn_separable_activities() {
    let data = prepare_subject(&synthetic_subject(1, &SyntheticConfig::default()), &PipelineConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 15, learning_rate: 3e-3, ..TrainConfig::default() };
    for arch in [Architecture::Ann, Architecture::Cnn1d, Architecture::LinearSoftmax] {
        let learner = train_local_model(&data, arch, &cfg).unwrap();
        assert!(learner.final_loss < learner.initial_loss, "{arch}: loss did not fall");
        let probs = learner.predict_proba(data.test_x.view()).unwrap();
        let report = MetricsReport::evaluate(probs.view(), data.test_t.0.view(), Provenance::default()).unwrap();
        assert!(report.macro_avg.accuracy > 0.9, "{arch}: accuracy {}", report.macro_avg.accuracy);
        assert!(report.macro_avg.balanced_accuracy > 0.9, "{arch}");
    }
}

#[test]
fn bilstm_loss_falls() {
    let data = prepare_subject(&synthetic_subject(2, &SyntheticConfig::small()), &PipelineConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 8, learning_rate: 3e-3, ..TrainConfig::default() };
    let learner = train_local_model(&data, Architecture::BiLstm, &cfg).unwrap();
    assert!(learner.final_loss < learner.initial_loss);
    let probs = learner.predict_proba(data.test_x.view()).unwrap();
    let report = MetricsReport::evaluate(probs.view(), data.test_t.0.view(), Provenance::default()).unwrap();
    assert!(report.macro_avg.accuracy > 1.0 / 12.0, "accuracy {}", report.macro_avg.accuracy);
}
