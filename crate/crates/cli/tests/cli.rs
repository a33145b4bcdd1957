use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pamkit::harness::{CHECKS_HEADER, CHI_TABLE_HEADER, CONCENTRATION_HEADER, RUNS_HEADER, SHAPE_PROFILE_HEADER, SWEEP_HEADER, TRENDS_HEADER};

fn pamkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pamkit")).args(args).output().expect("spawn pamkit")
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn small_config(dir: &Path, t_grid: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, format!(r#"{{"t_grid": {t_grid}, "seeds": [1, 2]}}"#)).unwrap();
    p.display().to_string()
}

#[test]
fn shape_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = pamkit(&["shape", "--rho", "1,4", "--radius", "20", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with(CHI_TABLE_HEADER));
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(first_line(&tmp.path().join("profile.csv")), SHAPE_PROFILE_HEADER);
    assert_eq!(first_line(&tmp.path().join("chi_table.csv")), CHI_TABLE_HEADER);
}

#[test]
fn simulate_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[20]");
    let out = tmp.path().join("run");
    let o = pamkit(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "2", "--dump-fields"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first_line(&out.join("runs.csv")), RUNS_HEADER);
    assert_eq!(first_line(&out.join("checks.csv")), CHECKS_HEADER);
    assert_eq!(first_line(&out.join("trends.csv")), TRENDS_HEADER);
    assert_eq!(first_line(&out.join("concentration.csv")), CONCENTRATION_HEADER);
    assert!(out.join("fields/s1-t20.csv").exists());
    assert_eq!(fs::read_to_string(out.join("runs.csv")).unwrap().lines().count(), 3);

    let o = pamkit(&["verify", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first_line(&out.join("verify_trends.csv")), "name,slope,direction,passed");

    let runs = out.join("runs.csv");
    let mut text = fs::read_to_string(&runs).unwrap();
    text.push_str("tampered\n");
    fs::write(&runs, text).unwrap();
    let o = pamkit(&["verify", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("runs.csv"));
}

#[test]
fn strict_turns_trend_flags_into_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[20, 25]");
    let out = tmp.path().join("run");
    let o = pamkit(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["hard_failures"], 0);
    let flags = report["trend_flags"].as_u64().unwrap();
    let o = pamkit(&["verify", "--strict", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(if flags > 0 { 1 } else { 0 }));
}

#[test]
fn islands_of_sampled_and_loaded_fields_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[20]");
    let a = tmp.path().join("a");
    let o = pamkit(&["islands", "--config", &cfg, "--seed", "2", "--t", "20", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gamma:"));
    assert_eq!(first_line(&a.join("capitals.csv")), "capital,cluster_eigenvalue,optimal,huge_eigenvalue,in_gamma,in_gamma_star");

    let b = tmp.path().join("b");
    let o = pamkit(&["simulate", "--config", &cfg, "--seed", "2", "--dump-fields", "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let field = b.join("fields/s2-t20.csv");
    let c = tmp.path().join("c");
    let o = pamkit(&["islands", "--config", &cfg, "--t", "20", "--field", field.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("capitals.csv")).unwrap(), fs::read(c.join("capitals.csv")).unwrap());
}

#[test]
fn sweep_writes_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[20]");
    let out = tmp.path().join("sweep");
    let o = pamkit(&["sweep", "--config", &cfg, "--seed", "1", "--axis", "a", "--values", "1,1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), SWEEP_HEADER);
    assert_eq!(text.lines().count(), 3);
    assert!(out.join("a_1.5/runs.csv").exists());
}

#[test]
fn errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"t_grid": [0.5]}"#).unwrap();
    assert_eq!(pamkit(&["simulate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&bad, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(pamkit(&["shape", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = tmp.path().join("nothing");
    assert_eq!(pamkit(&["verify", "--run", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(pamkit(&["sweep", "--out", missing.to_str().unwrap()]).status.code(), Some(2));
}
