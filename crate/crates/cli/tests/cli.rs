use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "experiment": "dgd_compare",
  "agents": 10,
  "topology": { "kind": "random", "p": [0.4, 1.0] },
  "kappa_f": [10],
  "seeds": [1, 2],
  "max_iter": 400
}"#;

fn dadmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dadmm"))
        .args(args)
        .output()
        .unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(sub: &str, cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    dadmm(&args)
}

#[test]
fn sweep_writes_rows_groups_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = run("sweep", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    // 2 points × 2 seeds × (admm + dgd) plus the header.
    assert_eq!(rows.lines().count(), 9);
    assert!(rows.lines().skip(1).all(|l| l.contains(",ok,")));
    assert!(out.join("groups.csv").exists());
    assert_eq!(
        std::fs::read_dir(out.join("trajectories")).unwrap().count(),
        8
    );
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("sweep", &cfg, &a, &[]).status.success());
    assert!(run("sweep", &cfg, &b, &[]).status.success());
    for name in ["rows.csv", "groups.csv"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    for entry in std::fs::read_dir(a.join("trajectories")).unwrap() {
        let entry = entry.unwrap();
        let other = b.join("trajectories").join(entry.file_name());
        assert_eq!(
            std::fs::read(entry.path()).unwrap(),
            std::fs::read(other).unwrap()
        );
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert!(run("run-admm", &cfg, &out, &["--seed", "9"])
        .status
        .success());
    let rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("9")));
    assert!(!rows.contains(",dgd,"));
}

#[test]
fn run_dgd_only_emits_dgd_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert!(run("run-dgd", &cfg, &out, &["--seed", "1"])
        .status
        .success());
    let rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.contains(",dgd,")));
}

#[test]
fn graph_spectra_and_rates_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        r#"{"experiment": "topology_study", "agents": 8, "topology": {"kind": "special", "kinds": ["complete", "star"]}, "seeds": [0]}"#,
    );
    let out = dir.path().join("out");
    for sub in ["gen-graph", "spectra", "rates"] {
        let o = run(sub, &cfg, &out, &[]);
        assert!(
            o.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let spectra = std::fs::read_to_string(out.join("spectra.csv")).unwrap();
    let star: Vec<&str> = spectra.lines().nth(2).unwrap().split(',').collect();
    let kappa: f64 = star[8].parse().unwrap();
    assert!((kappa - 8f64.sqrt()).abs() < 1e-9);
    assert_eq!(star[9], "true");
    let graphs = std::fs::read_to_string(out.join("graphs.csv")).unwrap();
    assert!(graphs.lines().nth(1).unwrap().contains(",28,complete,"));
    assert_eq!(std::fs::read_dir(out.join("graphs")).unwrap().count(), 2);
    let rates = std::fs::read_to_string(out.join("rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 3);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(dadmm(&["sweep"]).status.code(), Some(1));
    assert_eq!(dadmm(&["frobnicate"]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        run("sweep", missing.to_str().unwrap(), &out, &[])
            .status
            .code(),
        Some(1)
    );
    let cfg = config(
        dir.path(),
        r#"{"experiment": "c_sweep", "agents": 8, "topology": {"kind": "random", "p": [2.0]}, "seeds": [1]}"#,
    );
    let o = run("sweep", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ratio"));
    assert_eq!(dadmm(&["--help"]).status.code(), Some(0));
}

#[test]
fn failed_units_do_not_abort_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        r#"{"experiment": "linear_convergence", "agents": 10, "topology": {"kind": "random", "p": [0.05, 0.5]}, "seeds": [1]}"#,
    );
    let out = dir.path().join("out");
    assert!(run("sweep", &cfg, &out, &[]).status.success());
    let rows = std::fs::read_to_string(out.join("rows.csv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert!(lines[1].contains(",error: "));
    assert!(lines[2].contains(",ok,"));
}
