use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epictrl::pipeline::{Workspace, MANIFEST_FILE};
use tempfile::TempDir;

const LOW_NOISE: &str = r#"{"data": {"input_noise_std": 1e-6, "output_noise_std": 1e-6}}"#;

fn epictrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epictrl"))
        .args(args)
        .arg("--output")
        .arg(dir)
        .env_remove("EPICTRL_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn config(dir: &TempDir, name: &str, json: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, json).unwrap();
    p
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Hashes of every stage output, in manifest order.
fn output_hashes(dir: &Path) -> Vec<(String, String)> {
    Workspace::load(dir)
        .unwrap()
        .manifest
        .stages
        .iter()
        .flat_map(|s| s.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone())))
        .collect()
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn generate_writes_ten_outputs_deterministically() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let out = epictrl(d.path(), &["generate", "--seed", "11"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (header, rows) = csv_rows(&fs::read_to_string(a.path().join("data.csv")).unwrap());
    let ys: Vec<&String> = header.iter().filter(|h| h.starts_with('y')).collect();
    assert_eq!(ys.len(), 10);
    assert_eq!(header.len(), 15);
    assert_eq!(rows.len(), 301);
    assert_eq!(output_hashes(a.path()), output_hashes(b.path()));

    let c = TempDir::new().unwrap();
    epictrl(c.path(), &["generate", "--seed", "12"]);
    assert_ne!(output_hashes(a.path()), output_hashes(c.path()));
}

#[test]
fn noiseless_generate_records_truth_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", r#"{"data": {"input_noise_std": 0, "output_noise_std": 0}}"#);
    let out = epictrl(dir.path(), &["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (dh, data) = csv_rows(&fs::read_to_string(dir.path().join("data.csv")).unwrap());
    let (th, truth) = csv_rows(&fs::read_to_string(dir.path().join("truth.csv")).unwrap());
    for k in 1..=10 {
        let name = format!("y{k}");
        let i = dh.iter().position(|h| *h == name).unwrap();
        let j = th.iter().position(|h| *h == name).unwrap();
        for (d, t) in data.iter().zip(&truth) {
            assert_eq!(d[i], t[j], "{name} at t = {}", d[0]);
        }
    }
}

#[test]
fn low_noise_pipeline_runs_end_to_end_and_reproduces() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = config(&a, "c.json", LOW_NOISE);
    for d in [&a, &b] {
        let out = epictrl(d.path(), &["pipeline", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in [
        "parameters.csv",
        "observer_gains.json",
        "state_estimate.csv",
        "output_tracking.csv",
        "policy.csv",
        "predicted.csv",
        "e_forecast.csv",
        MANIFEST_FILE,
    ] {
        assert!(a.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(output_hashes(a.path()), output_hashes(b.path()));

    let out = epictrl(a.path(), &["report"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("terminal estimation error"));
    assert!(text.contains("optimal cost"));
    let comparison = fs::read_to_string(a.path().join("comparison.csv")).unwrap();
    let rows: Vec<&str> = comparison.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.split(',').all(|v| !v.is_empty())));

    let tampered = a.path().join("policy.csv");
    let mut bytes = fs::read(&tampered).unwrap();
    bytes.push(b'\n');
    fs::write(&tampered, bytes).unwrap();
    let out = epictrl(a.path(), &["report"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("policy.csv"), "{}", stderr(&out));
}

#[test]
fn real_data_mode_reports_estimates_only() {
    let src = TempDir::new().unwrap();
    let cfg = config(&src, "c.json", LOW_NOISE);
    assert_eq!(code(&epictrl(src.path(), &["generate", "--config", cfg.to_str().unwrap()])), 0);
    let data = src.path().join("data.csv");

    let dir = TempDir::new().unwrap();
    let json = format!(r#"{{"data": {{"file": {:?}}}}}"#, data.to_str().unwrap());
    let cfg = config(&src, "real.json", &json);
    let out = epictrl(dir.path(), &["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(dir.path().join("data.csv")).unwrap(),
        fs::read(&data).unwrap()
    );
    let out = epictrl(dir.path(), &["report"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("rel.err"));
    assert!(text.contains("n/a (no truth)"));
    let comparison = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    for row in comparison.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[1].is_empty() && !f[2].is_empty() && f[3].is_empty(), "{row}");
    }
}

#[test]
fn zero_output_matrix_fails_observer_design() {
    let dir = TempDir::new().unwrap();
    let zeros = vec!["0"; 60].join(",");
    let json = format!(
        r#"{{"data": {{"input_noise_std": 1e-6, "output_noise_std": 1e-6}},
            "observer": {{"output_matrix": {{"rows": 10, "cols": 6, "data": [{zeros}]}}}}}}"#
    );
    let cfg = config(&dir, "c.json", &json);
    let out = epictrl(dir.path(), &["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn validation_failures_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", r#"{"data": {"t1": 0}}"#);
    assert_eq!(code(&epictrl(dir.path(), &["pipeline", "--config", cfg.to_str().unwrap()])), 2);

    let cfg = config(&dir, "bad.json", r#"{"data": {"noise": 1}}"#);
    assert_eq!(code(&epictrl(dir.path(), &["generate", "--config", cfg.to_str().unwrap()])), 2);

    let fresh = TempDir::new().unwrap();
    let out = epictrl(fresh.path(), &["estimate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("generate"), "{}", stderr(&out));

    let out = epictrl(fresh.path(), &["report"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn incomplete_run_report_lists_missing_stages() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&epictrl(dir.path(), &["generate"])), 0);
    let out = epictrl(dir.path(), &["report"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for s in ["identify", "estimate", "design-observer", "observe", "control"] {
        assert!(err.contains(s), "{err}");
    }
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_epictrl"))
        .arg("generate")
        .env("EPICTRL_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("data.csv").is_file());
}
