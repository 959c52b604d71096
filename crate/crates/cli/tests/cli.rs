use std::path::Path;
use std::process::{Command, Output};

fn ppou(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppou")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn fit_help_exits_zero() {
    let out = ppou(&["fit", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--stage1-iters"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ppou(&["fit", "--problem", "sin1d", "--temperature", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_file_names_the_path() {
    let out = ppou(&[
        "fit",
        "--data",
        "/nonexistent/points.csv",
        "--model-out",
        "/tmp/unused.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/points.csv"));
}

#[test]
fn fit_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model, pred) = (
        dir.path().join("d.csv"),
        dir.path().join("m.json"),
        dir.path().join("p.csv"),
    );
    assert!(
        ppou(&["generate", "--problem", "sin1d", "--n", "60", "--out", &s(&data)])
            .status
            .success()
    );
    let fit = ppou(&[
        "fit",
        "--data",
        &s(&data),
        "--model-out",
        &s(&model),
        "-M",
        "2",
        "--stage1-iters",
        "40",
        "--stage3-iters",
        "10",
        "--width",
        "8",
    ]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(ppou(&[
        "predict",
        "--model",
        &s(&model),
        "--points",
        &s(&data),
        "--out",
        &s(&pred)
    ])
    .status
    .success());
    let text = std::fs::read_to_string(&pred).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,mean,std"));
    assert_eq!(lines.count(), 60);
}

#[test]
fn converge_writes_rows_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppou(&[
        "converge",
        "--problem",
        "sin1d",
        "--n-train",
        "60",
        "--n-test",
        "100",
        "--degrees",
        "1,2",
        "--configs",
        "1:1,1:2,1:3",
        "--reps",
        "1",
        "--stage1-iters",
        "20",
        "--stage3-iters",
        "5",
        "--out",
        &s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    let slopes = std::fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
    assert_eq!(slopes.lines().count(), 1 + 2);
}

#[test]
fn malformed_configs_are_usage_errors() {
    let out = ppou(&["converge", "--problem", "sin1d", "--configs", "4-2", "--out", "/tmp"]);
    assert_eq!(out.status.code(), Some(1));
}
