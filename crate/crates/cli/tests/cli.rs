use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SUBJECTS: u32 = 4;
const ROWS_PER_LABEL: &str = "30";

/// Flags for a quick run: three clients, subject 4 held out, two cheap
/// architectures and two epochs.
const QUICK: &[&str] = &[
    "--clients",
    "1,2,3",
    "--architectures",
    "ann,linear",
    "--epochs",
    "2",
    "--batch-size",
    "32",
    "--learning-rate",
    "0.005",
];
const QUICK_GLOBAL: &[&str] =
    &["--held-out", "4", "--global-architectures", "ann", "--global-epochs", "2", "--timeout-ms", "120000"];

fn fedstack(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedstack"));
    cmd.args(args).env_remove("FEDSTACK_DATA_DIR").env_remove("FEDSTACK_SEED").env_remove("RUST_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Synthetic subject logs written by `ingest --synthetic`.
fn synthetic_logs() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = fedstack(
        &[
            "ingest",
            "--synthetic",
            &SUBJECTS.to_string(),
            "--synthetic-rows",
            ROWS_PER_LABEL,
            "--out-dir",
            path(dir.path()),
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let raw = dir.path().join("ingest/raw");
    (dir, raw)
}

fn run_in(out_dir: &Path, data: &Path, command: &str, extra: &[&[&str]]) -> Output {
    let mut args = vec![command, "--out-dir", path(out_dir), "--data-dir", path(data), "--jobs", "4"];
    for e in extra {
        args.extend_from_slice(e);
    }
    fedstack(&args, &[])
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

/// Relative path to contents of every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn usage_and_data_errors_exit_2() {
    let out = fedstack(&["ingest", "--data-dir", "/nonexistent/fedstack-logs"], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));

    let out = fedstack(&["ingest"], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("FEDSTACK_DATA_DIR"));

    assert_eq!(code(&fedstack(&["federate", "--no-such-flag"], &[])), 2);
    assert_eq!(code(&fedstack(&["train-local", "--architectures", "mlp"], &[])), 2);
    let out = fedstack(&["report"], &[("FEDSTACK_SEED", "x")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("FEDSTACK_SEED"));
}

#[test]
fn unparsable_log_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mHealth_subject1.log"), "1\t2\tnot-a-number\n").unwrap();
    let out = fedstack(&["ingest", "--data-dir", path(dir.path()), "--out-dir", path(&dir.path().join("o"))], &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn ingest_writes_csvs_distribution_and_manifest() {
    let (dir, _) = synthetic_logs();
    let ingest = dir.path().join("ingest");
    for id in 1..=SUBJECTS {
        let rows = csv_rows(&ingest.join(format!("data/subject-{id}.csv")));
        assert_eq!(rows.len(), 12 * 30);
    }
    let dist = csv_rows(&ingest.join("distribution.csv"));
    assert_eq!(dist.len(), SUBJECTS as usize * 12);
    assert!(dist.iter().any(|r| r[2] == "subject-1" && r[3] == "act-12" && r[4] == "30"));
    assert!(fs::read_to_string(ingest.join("distribution.svg")).unwrap().contains("<svg"));

    let manifest = read_json(&ingest.join("manifest.json"));
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["seed"], 42);
    let hash = manifest["config_hash"].as_str().unwrap();
    for o in manifest["outputs"].as_array().unwrap() {
        let bytes = fs::read(ingest.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["bytes"], bytes.len());
        let text = String::from_utf8_lossy(&bytes);
        if !o["path"].as_str().unwrap().starts_with("raw/") && !o["path"].as_str().unwrap().starts_with("data/") {
            assert!(text.contains(hash), "{} lacks the config hash", o["path"]);
        }
    }
}

#[test]
fn single_subject_dir_gives_one_csv() {
    let (_keep, raw) = synthetic_logs();
    let one = tempfile::tempdir().unwrap();
    fs::copy(raw.join("mHealth_subject3.log"), one.path().join("mHealth_subject3.log")).unwrap();
    let out_dir = one.path().join("out");
    let out = run_in(&out_dir, one.path(), "ingest", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csvs: Vec<_> = fs::read_dir(out_dir.join("ingest/data")).unwrap().collect();
    assert_eq!(csvs.len(), 1);
    assert!(out_dir.join("ingest/data/subject-3.csv").is_file());
}

#[test]
fn train_local_is_complete_and_byte_identical_across_runs_and_threads() {
    let (_keep, raw) = synthetic_logs();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run_in(a.path(), &raw, "train-local", &[QUICK]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = fedstack(
        &[&["train-local", "--out-dir", path(b.path()), "--data-dir", path(&raw), "--jobs", "1"], QUICK].concat(),
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let summary = csv_rows(&a.path().join("train-local/summary.csv"));
    assert_eq!(summary.len(), 3 * 2);
    let clients: Vec<&str> = summary.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(clients, ["1", "1", "2", "2", "3", "3"]);
    for (client, arch) in [(1, "ann"), (3, "linear")] {
        let dir = a.path().join("train-local");
        assert_eq!(csv_rows(&dir.join(format!("local/client-{client}-{arch}.csv"))).len(), 12);
        assert!(!csv_rows(&dir.join(format!("predictions/client-{client}-{arch}.csv"))).is_empty());
        let ckpt = read_json(&dir.join(format!("models/client-{client}-{arch}.json")));
        assert!(ckpt["provenance"]["config_hash"].is_string());
    }
    assert_eq!(tree(&a.path().join("train-local")), tree(&b.path().join("train-local")));
}

#[test]
fn federate_reuses_local_models_and_transports_agree() {
    let (_keep, raw) = synthetic_logs();
    let a = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in(a.path(), &raw, "train-local", &[QUICK])), 0);
    let out = run_in(a.path(), &raw, "federate", &[QUICK, QUICK_GLOBAL, &["-v"]]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("reusing 6 local models"), "{}", stderr(&out));
    assert!(stdout(&out).contains("audit: PASS"));

    let fed = a.path().join("federate");
    let summary = read_json(&fed.join("summary.json"));
    assert_eq!(summary["data"]["audit_passed"], true);
    assert_eq!(summary["data"]["local"].as_array().unwrap().len(), 6);
    assert_eq!(summary["data"]["global"].as_array().unwrap().len(), 2);
    assert_eq!(csv_rows(&fed.join("summary.csv")).len(), 6 + 2);
    assert_eq!(csv_rows(&fed.join("per_label.csv")).len(), 2 * 12);
    assert!(fed.join("per_label.svg").is_file() && fed.join("global/heterogeneous-ann.csv").is_file());
    let transcript = fs::read_to_string(fed.join("transcript.jsonl")).unwrap();
    for line in transcript.lines() {
        let env: Value = serde_json::from_str(line).unwrap();
        assert_eq!(env["v"], 1);
        for key in ["type", "sender", "recipient", "seq", "payload"] {
            assert!(env.get(key).is_some(), "envelope lacks {key}");
        }
    }
    let local: Value = read_json(&a.path().join("train-local/summary.json"));
    assert_eq!(local["data"], summary["data"]["local"]);

    let b = tempfile::tempdir().unwrap();
    let out = run_in(b.path(), &raw, "federate", &[QUICK, QUICK_GLOBAL, &["--transport", "tcp"]]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(tree(&fed), tree(&b.path().join("federate")));
}

#[test]
fn injected_leak_exits_3_with_failed_audit() {
    let (_keep, raw) = synthetic_logs();
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &raw, "federate", &[QUICK, QUICK_GLOBAL, &["--inject-leak-client", "2"]]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("privacy audit failed"));
    let audit = read_json(&dir.path().join("federate/audit.json"));
    assert_eq!(audit["data"]["passed"], false);
    let violations = audit["data"]["violations"].as_array().unwrap();
    assert!(violations.iter().any(|v| v["sender"] == "client-2"));
    assert_eq!(read_json(&dir.path().join("federate/manifest.json"))["status"], "audit-failed");
    assert!(!String::from_utf8_lossy(&fedstack(&["federate", "--help"], &[]).stdout).contains("inject"));
}

#[test]
fn leave_one_out_writes_one_point_per_subject() {
    let (_keep, raw) = synthetic_logs();
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &raw, "federate", &[QUICK, QUICK_GLOBAL, &["--loo"]]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let loo = csv_rows(&dir.path().join("federate/loo.csv"));
    assert_eq!(loo.len(), 2 * SUBJECTS as usize);
    let summary = read_json(&dir.path().join("federate/summary.json"));
    let held: Vec<u64> =
        summary["data"]["loo"].as_array().unwrap().iter().map(|p| p["held_out"].as_u64().unwrap()).collect();
    assert_eq!(held, [1, 2, 3, 4]);
}

#[test]
fn ablate_sensor_reports_each_group() {
    let (_keep, raw) = synthetic_logs();
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &raw,
        "ablate-sensor",
        &[QUICK, QUICK_GLOBAL, &["--sensors", "chest,right-wrist", "--architecture", "ann"]],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let base = dir.path().join("ablate-sensor");
    let summary = csv_rows(&base.join("summary.csv"));
    assert_eq!(summary.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(), ["chest", "right-wrist"]);
    assert!(summary[0][4].parse::<usize>().unwrap() <= 3);
    assert_eq!(csv_rows(&base.join("sensors/chest.csv")).len(), 12);
    assert_eq!(csv_rows(&base.join("sensors.csv")).len(), 2 * 12);
}

#[test]
fn report_needs_runs_and_honours_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedstack(&["report", "--out-dir", path(dir.path())], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no runs"));

    let (_keep, raw) = synthetic_logs();
    assert_eq!(code(&run_in(dir.path(), &raw, "ingest", &[])), 0);
    assert_eq!(code(&run_in(dir.path(), &raw, "federate", &[QUICK, QUICK_GLOBAL])), 0);

    let out = fedstack(&["report", "--out-dir", path(dir.path()), "--tolerance", "1000", "--strict"], &[]);
    assert_eq!(code(&out), 3, "label counts stay exact: {}", stdout(&out));
    let rows = csv_rows(&dir.path().join("report/comparison.csv"));
    assert!(rows.iter().any(|r| r[2] == "label-counts"));
    assert!(rows.iter().filter(|r| r[8] != "0").all(|r| r[9] == "PASS"), "only exact comparisons may fail");
    let md = fs::read_to_string(dir.path().join("report/report.md")).unwrap();
    assert!(md.contains("report: FAIL"));

    // Without the ingest summary only local results remain, all within a loose tolerance.
    fs::remove_dir_all(dir.path().join("ingest")).unwrap();
    let out = fedstack(&["report", "--out-dir", path(dir.path()), "--tolerance", "1", "--strict"], &[]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("report: PASS"));
    let grid = csv_rows(&dir.path().join("report/local_global.csv"));
    assert_eq!(grid.iter().map(|r| r[2].as_str()).collect::<Vec<_>>(), ["client-1", "client-2", "client-3"]);
}

#[test]
fn config_precedence_flags_over_file_over_env() {
    let (_keep, raw) = synthetic_logs();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, format!(r#"{{"seed": 5, "data_dir": {:?}}}"#, path(&raw))).unwrap();
    let seed_of = |extra: &[&str], env: &[(&str, &str)]| {
        let out_dir = tempfile::tempdir().unwrap();
        let mut args = vec!["ingest", "--out-dir", path(out_dir.path())];
        args.extend_from_slice(extra);
        let out = fedstack(&args, env);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        read_json(&out_dir.path().join("ingest/manifest.json"))["seed"].as_u64().unwrap()
    };
    let data = path(&raw);
    assert_eq!(seed_of(&["--data-dir", data], &[]), 42);
    assert_eq!(seed_of(&[], &[("FEDSTACK_SEED", "9"), ("FEDSTACK_DATA_DIR", data)]), 9);
    assert_eq!(seed_of(&["--config", path(&cfg)], &[("FEDSTACK_SEED", "9")]), 5);
    assert_eq!(seed_of(&["--config", path(&cfg), "--seed", "3"], &[("FEDSTACK_SEED", "9")]), 3);
}
