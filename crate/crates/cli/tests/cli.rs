use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lattice-gas"))
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(out: &Path, experiment: &str, dim: usize) -> Value {
    json!({
        "experiment": experiment,
        "lattice": {"dim": dim, "sizes": [4, 8], "transverse_size": 3},
        "boundary": {"minus": 0.2, "plus": 0.8},
        "initial": {"kind": "constant", "value": 0.5},
        "schedule": {"t_end": 0.05, "checkpoints": [0.0, 0.025, 0.05], "replicas": 6, "seed": 3},
        "pde": {"axial_cells": 32, "transverse_cells": 4},
        "output": out,
    })
}

#[test]
fn pde_solve_with_identity_emits_checkpoints() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "pde", &small_run(dir.path(), "pde", 1));
    let o = run(&["pde-solve"], &config);
    assert!(o.status.success(), "{}", stderr(&o));
    let checkpoints = fs::read_to_string(dir.path().join("pde/pde/checkpoints.csv")).unwrap();
    // header plus 3 checkpoints of 32 cells
    assert_eq!(checkpoints.lines().count(), 1 + 3 * 32);
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pde/pde/pde-solve.json")).unwrap()).unwrap();
    assert_eq!(summary["metadata"]["command"], "pde-solve");
    assert!(summary["metadata"]["config_hash"].as_str().unwrap().len() == 64);
    assert!(summary["metadata"]["modules"]["pde"].is_string());
}

#[test]
fn oracle_with_equal_reservoirs_reports_the_product_measure() {
    let dir = TempDir::new().unwrap();
    let config = json!({
        "experiment": "tiny",
        "lattice": {"dim": 1, "sizes": [4]},
        "disorder": {"law": {"kind": "two-point-symmetric", "bound": 1.0}, "seed": 5},
        "boundary": {"minus": 0.5, "plus": 0.5},
        "initial": {"kind": "constant", "value": 0.5},
        "diffusion": {"kind": "table", "csv": "unused.csv", "metadata": "unused.json"},
        "schedule": {"t_end": 0.0, "replicas": 1},
        "output": dir.path(),
    });
    let path = write_config(dir.path(), "tiny", &config);
    let o = run(&["oracle"], &path);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text
        .lines()
        .find(|l| l.starts_with("max|nu_exact - nu_product| = "))
        .expect("product error line");
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-10, "{err}");
    assert!(dir.path().join("tiny/4/marginals.csv").exists());
}

#[test]
fn compare_with_mismatched_dims_names_both() {
    let dir = TempDir::new().unwrap();
    let a = write_config(dir.path(), "a", &small_run(dir.path(), "a", 1));
    let b = write_config(dir.path(), "b", &small_run(dir.path(), "b", 2));
    let o = bin()
        .args(["compare", "--config"])
        .arg(&a)
        .arg("--against")
        .arg(&b)
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("lattice.dim"), "{err}");
    assert!(err.contains("d = 1") && err.contains("d = 2"), "{err}");
}

#[test]
fn compare_of_two_seeds_succeeds() {
    let dir = TempDir::new().unwrap();
    let a = write_config(dir.path(), "a", &small_run(dir.path(), "a", 1));
    let mut other = small_run(dir.path(), "b", 1);
    other["schedule"]["seed"] = json!(4);
    let b = write_config(dir.path(), "b", &other);
    assert!(run(&["simulate"], &a).status.success());
    assert!(run(&["simulate"], &b).status.success());
    let o = bin()
        .args(["compare", "--config"])
        .arg(&a)
        .arg("--against")
        .arg(&b)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("a/8/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    // same initial profile, independent samples: nonzero but finite distance
    let l1: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(l1 > 0.0 && l1 < 1.0);
}

#[test]
fn malformed_config_names_the_field_path() {
    let dir = TempDir::new().unwrap();
    let mut config = small_run(dir.path(), "bad", 1);
    config["schedule"]["replicas"] = json!("many");
    let path = write_config(dir.path(), "bad", &config);
    let o = run(&["simulate"], &path);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schedule.replicas"), "{}", stderr(&o));

    let mut config = small_run(dir.path(), "bad", 1);
    config["boundary"]["plus"] = json!(1.0);
    let path = write_config(dir.path(), "bad", &config);
    let o = run(&["pde-solve"], &path);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("boundary.plus"), "{}", stderr(&o));

    let mut config = small_run(dir.path(), "bad", 1);
    config["lattice"]["sizes"] = json!([8, 4]);
    let path = write_config(dir.path(), "bad", &config);
    let o = run(&["gen-disorder"], &path);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lattice.sizes"), "{}", stderr(&o));
}

#[test]
fn breached_tolerance_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let mut config = small_run(dir.path(), "strict", 1);
    config["tolerances"] = json!({"l1_max": 1e-9});
    let path = write_config(dir.path(), "strict", &config);
    let o = run(&["simulate"], &path);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("L1"), "{}", stderr(&o));
}

fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_configs_give_identical_bytes_for_any_worker_count() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut config = small_run(&out, "repro", 2);
    config["disorder"] = json!({"law": {"kind": "uniform-symmetric", "bound": 0.5}, "seed": 9});
    config["diffusion"] = json!({
        "kind": "estimate",
        "basis": {"radius": 0},
        "grid": [0.2, 0.5, 0.8],
        "samples": 2000,
        "seed": 1,
        "batches": 4
    });
    config["schedule"]["disorder_samples"] = json!(2);
    let path = write_config(dir.path(), "repro", &config);
    let mut runs = Vec::new();
    for workers in ["1", "3"] {
        if out.exists() {
            fs::remove_dir_all(&out).unwrap();
        }
        for cmd in ["gen-disorder", "estimate-diffusion", "simulate", "pde-solve"] {
            let o = bin()
                .env("LATTICE_GAS_WORKERS", workers)
                .arg(cmd)
                .arg("--config")
                .arg(&path)
                .output()
                .unwrap();
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
        runs.push(snapshot(&out));
    }
    assert!(runs[0].len() > 10);
    assert_eq!(runs[0].len(), runs[1].len());
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs between runs", a.0.display());
    }
}
