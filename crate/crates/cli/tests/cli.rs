use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn icct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icct"))
        .args(args)
        .env("ICCT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = r#"{"n_classes": 4, "dim": 5, "train_per_class": 30, "test_per_class": 10,
  "center_scale": 3.0, "stddev": 1.0, "overlap_pairs": 1, "pair_separation": 1.0, "seed": 3}"#;

fn config(dir: &Path, transfer: &str, lambda: &str, scenario: &str, out: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "data": {{"csv": {{"train": "{train}", "test": "{test}"}}}},
  "teacher": {{"layer_sizes": [5, 16, 4], "optimizer": {{"learning_rate": 0.05, "weight_decay": 0.01, "momentum": 0.9}}, "epochs": 3}},
  "student": {{"layer_sizes": [5, 6, 4], "optimizer": {{"learning_rate": 0.05, "momentum": 0.9}}, "epochs": 3}},
  "transfer": {transfer},
  "lambda": {lambda},
  "scenario": {scenario},
  "batch_size": 16,
  "output_dir": "{out}",
  "seeds": [1, 2]
}}"#,
        train = p(&dir.join("data/train.csv")),
        test = p(&dir.join("data/test.csv")),
        out = p(&dir.join(out)),
    );
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, text).unwrap();
    path
}

fn with_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let out = icct(&["gen-data", "--spec", p(&spec), "--out", p(&dir.path().join("data"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_data_writes_both_splits_reproducibly() {
    let dir = with_data();
    let data = dir.path().join("data");
    assert_eq!(line_count(&data.join("train.csv")), 1 + 4 * 30);
    assert_eq!(line_count(&data.join("test.csv")), 1 + 4 * 10);
    let first = fs::read(data.join("train.csv")).unwrap();
    let spec = dir.path().join("spec.json");
    let again = dir.path().join("again");
    assert!(icct(&["gen-data", "--spec", p(&spec), "--out", p(&again)]).status.success());
    assert_eq!(first, fs::read(again.join("train.csv")).unwrap());
}

#[test]
fn gen_data_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC.replace("\"n_classes\": 4", "\"n_classes\": 1").replace("\"overlap_pairs\": 1", "\"overlap_pairs\": 0")).unwrap();
    let out = icct(&["gen-data", "--spec", p(&spec), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gen_data_unwritable_path_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = icct(&["gen-data", "--spec", p(&spec), "--out", p(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(7));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(icct(&["train"]).status.code(), Some(2));
    assert_eq!(icct(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = with_data();
    let cfg = config(dir.path(), r#"{"kind": "None"}"#, "null", r#"{"kind": "TeacherLarger"}"#, "solo");
    let text = fs::read_to_string(&cfg).unwrap().replace("\"batch_size\"", "\"bogus\": 1, \"batch_size\"");
    fs::write(&cfg, text).unwrap();
    let out = icct(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_distill_report_pipeline() {
    let dir = with_data();
    let root = dir.path();
    let solo = config(root, r#"{"kind": "None"}"#, "null", r#"{"kind": "TeacherLarger"}"#, "runs");
    let out = icct(&["train", "--config", p(&solo), "--model", "teacher"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = icct(&["train", "--config", p(&solo)]);
    assert!(out.status.success());
    let runs = root.join("runs");
    let solo_summary = fs::read_to_string(runs.join("s_b/summary.csv")).unwrap();
    assert!(solo_summary.lines().nth(1).unwrap().starts_with("S(B),2,"));
    for seed in [1, 2] {
        for f in ["model.ckpt", "report.csv", "report.json"] {
            assert!(runs.join(format!("s_b/seed_{seed}/{f}")).exists());
        }
    }
    let teacher = runs.join("t_b/seed_1/model.ckpt");

    let icc = config(root, r#"{"kind": "Icc"}"#, "0.1", r#"{"kind": "TeacherLarger"}"#, "runs_icc");
    let text = fs::read_to_string(&icc).unwrap().replace(p(&root.join("runs_icc")), p(&runs));
    fs::write(&icc, text).unwrap();
    let out = icct(&["distill", "--config", p(&icc), "--teacher", p(&teacher)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(runs.join("icct/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("ICCT,2,"));

    let report = icct(&["report", "--runs", p(&runs)]);
    assert!(report.status.success());
    let table = String::from_utf8(report.stdout.clone()).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "scenario,method,n_runs,mean_test_err,s_baseline,t_baseline");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("Cap_T>Cap_S,T(B),2,"));
    assert!(rows[2].starts_with("Cap_T>Cap_S,S(B),2,"));
    assert!(rows[3].starts_with("Cap_T>Cap_S,ICCT,2,"));
    assert_eq!(icct(&["report", "--runs", p(&runs)]).stdout, report.stdout);

    // Rerunning a command rewrites identical bytes.
    let before = fs::read(runs.join("icct/seed_2/report.csv")).unwrap();
    assert!(icct(&["distill", "--config", p(&icc), "--teacher", p(&teacher)]).status.success());
    assert_eq!(before, fs::read(runs.join("icct/seed_2/report.csv")).unwrap());
}

#[test]
fn zero_lambda_distill_matches_solo_summary() {
    let dir = with_data();
    let root = dir.path();
    let solo = config(root, r#"{"kind": "None"}"#, "null", r#"{"kind": "TeacherLarger"}"#, "solo");
    assert!(icct(&["train", "--config", p(&solo), "--model", "teacher"]).status.success());
    assert!(icct(&["train", "--config", p(&solo)]).status.success());
    let teacher = root.join("solo/t_b/seed_1/model.ckpt");
    let zero = config(root, r#"{"kind": "Icc"}"#, "0.0", r#"{"kind": "TeacherLarger"}"#, "zero");
    let out = icct(&["distill", "--config", p(&zero), "--teacher", p(&teacher)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read_to_string(root.join("solo/s_b/summary.csv")).unwrap();
    let b = fs::read_to_string(root.join("zero/icct/summary.csv")).unwrap();
    let strip = |s: &str| s.lines().nth(1).unwrap().split_once(',').unwrap().1.to_string();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn distill_rejects_mismatched_teacher() {
    let dir = with_data();
    let root = dir.path();
    let solo = config(root, r#"{"kind": "None"}"#, "null", r#"{"kind": "TeacherLarger"}"#, "solo");
    assert!(icct(&["train", "--config", p(&solo)]).status.success());
    let student_ckpt = root.join("solo/s_b/seed_1/model.ckpt");
    let icc = config(root, r#"{"kind": "Icc"}"#, "0.1", r#"{"kind": "TeacherLarger"}"#, "icc");
    let out = icct(&["distill", "--config", p(&icc), "--teacher", p(&student_ckpt)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher.layer_sizes"));
}

#[test]
fn born_again_writes_generation_summaries() {
    let dir = with_data();
    let root = dir.path();
    let cfg = config(root, r#"{"kind": "Icc"}"#, "0.1", r#"{"kind": "Equal", "generations": 4}"#, "ba");
    let out = icct(&["born-again", "--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(root.join("ba/born_again/summary.csv")).unwrap();
    let labels: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["S(B)", "Gen #1", "Gen #2", "Gen #3", "Gen #4"]);
    assert!(root.join("ba/born_again/seed_2/gen_4.ckpt").exists());
}

#[test]
fn born_again_needs_equal_scenario() {
    let dir = with_data();
    let cfg = config(dir.path(), r#"{"kind": "Icc"}"#, "0.1", r#"{"kind": "TeacherLarger"}"#, "ba");
    assert_eq!(icct(&["born-again", "--config", p(&cfg)]).status.code(), Some(4));
}

#[test]
fn icc_dump_maps_and_divergence() {
    let dir = with_data();
    let root = dir.path();
    let solo = config(root, r#"{"kind": "None"}"#, "null", r#"{"kind": "TeacherLarger"}"#, "solo");
    assert!(icct(&["train", "--config", p(&solo)]).status.success());
    assert!(icct(&["train", "--config", p(&solo), "--model", "teacher"]).status.success());
    let data = root.join("data/test.csv");
    let (a, b) = (root.join("a.csv"), root.join("b.csv"));
    let out = icct(&[
        "icc-dump",
        "--checkpoint", p(&root.join("solo/s_b/seed_1/model.ckpt")),
        "--checkpoint", p(&root.join("solo/t_b/seed_1/model.ckpt")),
        "--data", p(&data),
        "--batch", "1",
        "--batch-size", "16",
        "--out", p(&a),
        "--out", p(&b),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let kl_line = stdout.lines().find(|l| l.starts_with("KL(map 0 || map 1)")).unwrap();
    let kl: f64 = kl_line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(kl > 0.0);
    for path in [&a, &b] {
        let map = icct_map_sum(path);
        assert!((map - 1.0).abs() < 1e-9, "sum {map}");
    }

    let out = icct(&[
        "icc-dump",
        "--checkpoint", p(&root.join("solo/s_b/seed_1/model.ckpt")),
        "--data", p(&data),
        "--batch", "3",
        "--batch-size", "16",
        "--out", p(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn icct_map_sum(path: &Path) -> f64 {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum()
}

#[test]
fn gradcheck_passes_and_prints_reports() {
    let out = icct(&["gradcheck"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn gradcheck_failure_is_numeric_exit() {
    let out = icct(&["gradcheck", "--tol", "1e-14"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
    assert!(String::from_utf8(out.stderr).unwrap().contains("gradient check failed"));
}

#[test]
fn report_on_empty_directory_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = icct(&["report", "--runs", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
