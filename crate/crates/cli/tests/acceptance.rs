//! CLI-level acceptance: byte reproducibility across runs and worker
//! counts, and the configuration-error contract.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_shocklaw")
}

fn scenario_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn shocklaw")
}

/// Collect file name -> bytes for every artifact in a directory.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        out.insert(
            entry.file_name().to_string_lossy().into_owned(),
            std::fs::read(entry.path()).unwrap(),
        );
    }
    out
}

#[test]
fn c10_byte_identical_outputs_across_runs_and_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = scenario_path("smoke.toml");
    let dirs = ["run_a", "run_b", "workers_8"];
    let worker_args = ["1", "1", "8"];
    for (dir, workers) in dirs.iter().zip(worker_args) {
        let out = tmp.path().join(dir);
        let status = run(&[
            "simulate",
            "--scenario",
            scenario.to_str().unwrap(),
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            status.status.success(),
            "simulate failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    let a = artifacts(&tmp.path().join("run_a"));
    let b = artifacts(&tmp.path().join("run_b"));
    let w8 = artifacts(&tmp.path().join("workers_8"));
    assert!(a.keys().any(|k| k.ends_with(".csv")));
    let pass = a == b && a == w8;
    println!(
        "ACCEPTANCE C10 reproducibility: {} ({} artifacts byte-compared across seeds and worker counts 1/8)",
        if pass { "PASS" } else { "FAIL" },
        a.len()
    );
    assert!(pass);

    // A different seed must change the statistical outputs.
    let out = tmp.path().join("other_seed");
    let status = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--seed",
        "999",
        "--workers",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    let other = artifacts(&out);
    assert_ne!(
        a.get("ensemble_summary.csv"),
        other.get("ensemble_summary.csv")
    );
}

#[test]
fn unknown_model_name_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = std::fs::read_to_string(scenario_path("smoke.toml")).unwrap();
    let bad = raw.replace("name = \"shifted_burgers\"", "name = \"nope\"");
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, bad).unwrap();
    let out = run(&["simulate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown model name"), "stderr: {err}");
}

#[test]
fn schema_violations_carry_location_context() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("broken.toml");
    std::fs::write(&path, "[scenario]\nname = \"x\"\n").unwrap();
    let out = run(&["kinetic", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line") || err.contains("missing field"), "stderr: {err}");

    let out = run(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cfl_precheck_rejects_under_resolved_time_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = std::fs::read_to_string(scenario_path("smoke.toml")).unwrap();
    let bad = raw
        .replace("nx = 1", "nx = 201")
        .replace("nt = 120", "nt = 2");
    let path = tmp.path().join("cfl.toml");
    std::fs::write(&path, bad).unwrap();
    let out = run(&["kinetic", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("CFL"), "stderr: {err}");
}

#[test]
fn degenerate_validate_passes_with_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("val");
    let out = run(&[
        "validate",
        "--scenario",
        scenario_path("degenerate.toml").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let verdict = std::fs::read_to_string(out_dir.join("verdict.txt")).unwrap();
    assert!(verdict.contains("[PASS] overall"));
    assert!(out_dir.join("verdict.csv").exists());
    assert!(out_dir.join("manifest.txt").exists());
}
