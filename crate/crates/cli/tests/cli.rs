//! End-to-end command tests through the compiled binary: output shapes,
//! exit codes, reproducibility, and byte-identity across worker counts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sae-ipw"))
}

fn write_toy_csv(dir: &Path) -> std::path::PathBuf {
    // Three areas, mixed sampled/non-sampled, area "c" has no treated
    // units in the sample (but some in the population).
    let mut rows = String::from("area,x1,w,y,in_sample\n");
    let mut k = 0u32;
    for (area, n, treated_in_sample) in [("a", 14, true), ("b", 14, true), ("c", 14, false)] {
        for i in 0..n {
            k += 1;
            let x = (k % 7) as f64 * 0.3 + 0.1;
            let sampled = i < 8;
            let w = if sampled {
                u8::from(treated_in_sample && i % 3 == 0)
            } else {
                u8::from(i % 3 == 0)
            };
            let y = 2.0 + 1.5 * x + 2.0 * w as f64 + ((k * 37 % 11) as f64 - 5.0) * 0.3;
            if sampled {
                rows.push_str(&format!("{area},{x},{w},{y},1\n"));
            } else {
                rows.push_str(&format!("{area},{x},{w},,0\n"));
            }
        }
    }
    let path = dir.join("toy.csv");
    std::fs::write(&path, rows).unwrap();
    path
}

#[test]
fn estimate_writes_tables_and_flags_undefined_direct_area() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_toy_csv(dir.path());
    let out = dir.path().join("out");
    let status = bin()
        .args([
            "estimate",
            "--input",
            input.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--methods",
            "direct,eblup,mq",
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let estimates = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert!(estimates.starts_with("# seed: 5\n"));
    assert!(estimates.contains("# config:"));
    // Direct is undefined for area c (no sampled treated units).
    let direct_c = estimates
        .lines()
        .find(|l| l.starts_with("c,direct"))
        .expect("row for area c");
    assert!(direct_c.contains("no-sampled-treated"));
    assert!(direct_c.split(',').nth(2).unwrap().is_empty());
    // Model-based methods produce estimates for every area.
    for area in ["a", "b", "c"] {
        for method in ["eblup", "mq"] {
            let row = estimates
                .lines()
                .find(|l| l.starts_with(&format!("{area},{method}")))
                .expect("row present");
            let est = row.split(',').nth(2).unwrap();
            assert!(!est.is_empty(), "missing estimate in {row}");
            let rmse = row.split(',').nth(3).unwrap();
            assert!(!rmse.is_empty(), "missing rmse in {row}");
        }
    }
    let national = std::fs::read_to_string(out.join("national.csv")).unwrap();
    assert!(national.contains("eblup,"));
    assert!(national.contains("mq,"));
}

#[test]
fn estimate_rejects_bad_schema_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_toy_csv(dir.path());
    let out = dir.path().join("out");
    let output = bin()
        .args([
            "estimate",
            "--input",
            input.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--schema",
            "w=no_such_column",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(!out.join("estimates.csv").exists());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("kind=schema"), "stderr: {stderr}");
}

#[test]
fn simulate_is_byte_identical_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, workers) in [("w1", "1"), ("w4", "4"), ("w8", "8"), ("w1b", "1")] {
        let out = dir.path().join(name);
        let status = bin()
            .args([
                "simulate",
                "--scenario",
                "1a",
                "--areas",
                "10",
                "--pop",
                "40",
                "--samp",
                "6",
                "--reps",
                "12",
                "--seed",
                "42",
                "--workers",
                workers,
                "--out-dir",
                out.to_str().unwrap(),
                "--svg",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        let study = std::fs::read(out.join("study.csv")).unwrap();
        let summary = std::fs::read(out.join("summary.csv")).unwrap();
        let svg = std::fs::read(out.join("rrmse_boxplot.svg")).unwrap();
        outputs.push((study, summary, svg));
    }
    for other in &outputs[1..] {
        assert_eq!(outputs[0].0, other.0, "study.csv differs");
        assert_eq!(outputs[0].1, other.1, "summary.csv differs");
        assert_eq!(outputs[0].2, other.2, "svg differs");
    }
}

#[test]
fn simulate_rejects_unknown_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args([
            "simulate",
            "--scenario",
            "9z",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn diagnose_needs_a_propensity_source() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_toy_csv(dir.path());
    let output = bin()
        .args([
            "diagnose",
            "--input",
            input.to_str().unwrap(),
            "--out-dir",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));

    // With a fitted model the diagnostics write both tables.
    let out = dir.path().join("diag");
    let status = bin()
        .args([
            "diagnose",
            "--input",
            input.to_str().unwrap(),
            "--prop-model",
            "glmm",
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let balance = std::fs::read_to_string(out.join("balance.csv")).unwrap();
    assert!(balance.lines().any(|l| l.starts_with("a,")));
    let support = std::fs::read_to_string(out.join("support.csv")).unwrap();
    assert!(support.lines().count() >= 4);
}

#[test]
fn bootstrap_command_writes_replication_log() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_toy_csv(dir.path());
    let out = dir.path().join("out");
    let status = bin()
        .args([
            "bootstrap",
            "--input",
            input.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--methods",
            "eblup",
            "--boot-reps",
            "4",
            "--seed",
            "9",
        ])
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let log = std::fs::read_to_string(out.join("boot_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().contains("# seed: 9"));
    assert!(log.contains("rep,area,tau_star,tau_hat_star,status"));
    assert!(log.lines().count() > 4);
}

#[test]
fn config_file_fills_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_toy_csv(dir.path());
    let config = dir.path().join("run.conf");
    std::fs::write(&config, "methods = eblup\nclip = 0.01\n").unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args([
            "estimate",
            "--input",
            input.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let estimates = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    // Config selected eblup only: no direct or mq rows.
    assert!(estimates.lines().any(|l| l.contains(",eblup,")));
    assert!(!estimates.lines().any(|l| l.contains(",direct,")));
    assert!(!estimates.lines().any(|l| l.contains(",mq,")));
}
