//! CLI surface checks: exit-code classes, config-file precedence, and the
//! output-directory environment fallback.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dimex")
}

fn run_in(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["simulate", "--scenario", "dodecahedron", "--out", "."],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));

    let out = run_in(
        dir.path(),
        &["simulate", "--scenario", "stationary", "--n", "0", "--out", "."],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "expand",
            "--locations",
            "absent.csv",
            "--observations",
            "also-absent.csv",
            "--out",
            ".",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.conf"),
        "scenario=stationary\ns=9\nn=5\nseed=2\n",
    )
    .unwrap();

    // config alone
    let out = run_in(
        dir.path(),
        &["simulate", "--config", "run.conf", "--out", "cfg"],
    );
    assert!(out.status.success());
    let cfg_locs = std::fs::read_to_string(dir.path().join("cfg/locations.csv")).unwrap();
    assert_eq!(cfg_locs.lines().count(), 10);

    // flag beats config
    let out = run_in(
        dir.path(),
        &[
            "simulate", "--config", "run.conf", "--s", "12", "--out", "flag",
        ],
    );
    assert!(out.status.success());
    let flag_locs = std::fs::read_to_string(dir.path().join("flag/locations.csv")).unwrap();
    assert_eq!(flag_locs.lines().count(), 13);

    let echo = std::fs::read_to_string(dir.path().join("flag/run_config.json")).unwrap();
    assert!(echo.contains("\"s\": \"12\""));
    assert!(echo.contains("\"format_version\""));
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("from-env");
    let out = Command::new(bin())
        .args(["simulate", "--scenario", "stationary", "--s", "6", "--n", "4", "--seed", "1"])
        .current_dir(dir.path())
        .env("DIMEX_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out_dir.join("locations.csv").exists());
    assert!(out_dir.join("observations.csv").exists());
}

#[test]
fn malformed_config_line_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "# fine\nnot a pair\n").unwrap();
    let out = run_in(
        dir.path(),
        &["simulate", "--config", "bad.conf", "--out", "."],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("key=value"));
}
