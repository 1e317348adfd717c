use std::path::Path;
use std::process::{Command, Output};

use bohmflow::ExperimentConfig;

fn bohmflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bohmflow"))
        .args(args)
        .env_remove("BOHMFLOW_OUT")
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not error JSON ({e}): {text}"))
}

/// The free scenario shrunk to a handful of trajectories.
fn small_free_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::load("free_gaussian_1d").unwrap();
    cfg.ensemble.count = 48;
    cfg.ensemble.samples = 40;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn lists_builtin_scenarios() {
    let out = bohmflow(&["list-scenarios"]);
    assert!(out.status.success());
    let names: Vec<String> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    for expected in [
        "free_gaussian_1d",
        "gaussian_well_scatter_1d",
        "poschl_teller_mixed_1d",
        "gaussian_well_3d_small",
    ] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
}

#[test]
fn exported_scenarios_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = bohmflow(&["export-scenario", "poschl_teller_mixed_1d"]);
    assert!(out.status.success());
    let path = dir.path().join("pt.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let cfg = ExperimentConfig::load(path.to_str().unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::load("poschl_teller_mixed_1d").unwrap());

    let out = bohmflow(&["export-scenario", "no_such_scenario"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_without_frames_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bohmflow(&["verify", "-c", "free_gaussian_1d", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["exit_code"], 1);
    assert!(
        err["message"].as_str().unwrap().contains("missing frames manifest"),
        "{err}"
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = bohmflow(&["export-scenario", "free_gaussian_1d"]).stdout;
    let mut text = String::from_utf8(text).unwrap();
    text.push_str("\n[extra]\nvalue = 1\n");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = bohmflow(&[
        "propagate",
        "-c",
        path.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "config");
}

#[test]
fn boundary_breach_invalidates_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load("free_gaussian_1d").unwrap();
    // the packet reaches x ≈ 20 by t = 10, well inside the absorbing shell
    cfg.grid.half_extent = 16.0;
    cfg.grid.points = 256;
    let path = dir.path().join("tight.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = bohmflow(&[
        "propagate",
        "-c",
        path.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"], "invalid_run");
    assert!(err["message"].as_str().unwrap().contains("boundary"), "{err}");
}

#[test]
fn stages_communicate_through_files_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_free_config(dir.path());
    let run = dir.path().join("run");
    let (cfg, run) = (cfg.to_str().unwrap(), run.to_str().unwrap());
    for stage in ["propagate", "split", "asymptote", "trajectories"] {
        let out = bohmflow(&[stage, "-c", cfg, "-o", run]);
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let verify = bohmflow(&["verify", "-c", cfg, "-o", run]);
    let text = String::from_utf8(verify.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("PASS unitarity")), "{text}");
    assert!(Path::new(run).join("report.json").exists());
    assert!(Path::new(run).join("summary.csv").exists());

    // without the ensemble the report cannot be produced
    std::fs::remove_file(Path::new(run).join("ensemble.ndjson")).unwrap();
    let out = bohmflow(&["verify", "-c", cfg, "-o", run]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("ensemble"));
}

#[test]
fn ensembles_are_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_free_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let run = dir.path().join(name);
        let out = bohmflow(&["all", "-c", cfg, "-o", run.to_str().unwrap(), "--threads", threads]);
        assert!(
            matches!(out.status.code(), Some(0 | 3)),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.push(std::fs::read(run.join("ensemble.ndjson")).unwrap());
    }
    assert!(!outputs[0].is_empty());
    assert!(outputs[0] == outputs[1], "ensemble output depends on the run");

    // a different seed draws different starting points
    let run = dir.path().join("c");
    let out = bohmflow(&["all", "-c", cfg, "-o", run.to_str().unwrap(), "--seed", "7"]);
    assert!(matches!(out.status.code(), Some(0 | 3)));
    assert!(std::fs::read(run.join("ensemble.ndjson")).unwrap() != outputs[0]);
}

#[test]
fn output_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_free_config(dir.path());
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");
    let out = Command::new(env!("CARGO_BIN_EXE_bohmflow"))
        .args([
            "propagate",
            "-c",
            cfg.to_str().unwrap(),
            "-o",
            flag_dir.to_str().unwrap(),
        ])
        .env("BOHMFLOW_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag_dir.join("frames/manifest.json").exists());
    assert!(!env_dir.exists());

    let out = Command::new(env!("CARGO_BIN_EXE_bohmflow"))
        .args(["propagate", "-c", cfg.to_str().unwrap()])
        .env("BOHMFLOW_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_dir.join("frames/manifest.json").exists());
}
