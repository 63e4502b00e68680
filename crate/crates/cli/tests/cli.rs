use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn abh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abh")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
    "total_steps": 12, "pretrain_steps": 4, "adam_steps": 8, "width": 8, "hidden_layers": 2,
    "batch_size": 10, "train_mesh_a": 9, "train_mesh_z": 5, "equilibrium_update_every": 2,
    "fd_n_a": 21, "fd_n_z": 3, "fd_n_t": 11
}"#;

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn solve_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = abh(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("override out"), "{stderr}");

    let tp = std::fs::read_to_string(out.join("timepaths.csv")).unwrap();
    let lines: Vec<&str> = tp.lines().collect();
    assert_eq!(lines[0], "t,K,Y,r,w");
    assert_eq!(lines.len(), 12);
    for t in ["1", "2", "5", "9"] {
        let s = std::fs::read_to_string(out.join(format!("slice_t{t}.csv"))).unwrap();
        assert_eq!(s.lines().next(), Some("a,z,v,c,g"));
        assert_eq!(s.lines().count(), 101 * 101 + 1);
    }
    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(losses.starts_with("step,hjb,"));
    assert_eq!(losses.lines().count(), 13);
    assert!(out.join("state_final.bin").exists());

    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["command"], "solve");
    assert_eq!(m["seed"], 42);
    assert_eq!(m["formats"]["state"], 1);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["artifacts"]["losses.csv"].is_string());
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = abh(&["solve", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "6", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("override total_steps = 6 (command line)"), "{stderr}");
    assert!(stderr.contains("override total_steps = 12 (config file)"), "{stderr}");
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["train"]["total_steps"], 6);
    assert_eq!(std::fs::read_to_string(out.join("losses.csv")).unwrap().lines().count(), 7);
}

#[test]
fn resumed_solve_matches_uninterrupted_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    assert!(abh(&["solve", "--config", &cfg, "--out", full.to_str().unwrap()]).status.success());
    assert!(abh(&["solve", "--config", &cfg, "--out", part.to_str().unwrap(), "--steps", "7"]).status.success());
    let ck = part.join("state_final.bin");
    let o = abh(&["solve", "--config", &cfg, "--out", part.to_str().unwrap(), "--resume", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(full.join("losses.csv")).unwrap();
    let b = std::fs::read(part.join("losses.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(full.join("state_final.bin")).unwrap(), std::fs::read(part.join("state_final.bin")).unwrap());
}

#[test]
fn empty_config_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    // Resolving a missing checkpoint fails after the configuration is accepted.
    let o = abh(&["emit", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn configuration_errors_exit_with_two_and_list_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"gamma": -1, "rho": -0.5, "mystery": 3}"#);
    let o = abh(&["fd", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mystery"), "{err}");

    let cfg = write_config(dir.path(), r#"{"gamma": -1, "rho": -0.5}"#);
    let o = abh(&["fd", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gamma") && err.contains("rho"), "{err}");
}

#[test]
fn fd_and_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("fd");
    let o = abh(&["fd", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("fd_summary.json"));
    assert_eq!(s["upwind_consistent_fraction"], 1.0);
    assert_eq!(std::fs::read_to_string(out.join("timepaths.csv")).unwrap().lines().count(), 12);

    let o = abh(&["compare", "--fd-self", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("compare_report.json"));
    for k in ["rel_l2_v", "rel_l2_c", "rel_l2_g", "k_abs_max", "k_rel_max", "r_abs_max"] {
        assert_eq!(r["errors"][k], 0.0, "{k}");
    }
}

#[test]
fn compare_and_emit_read_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o_str = out.to_str().unwrap();
    assert!(abh(&["compare", "--config", &cfg, "--out", o_str]).status.code() == Some(1));
    assert!(abh(&["solve", "--config", &cfg, "--out", o_str]).status.success());
    let o = abh(&["compare", "--config", &cfg, "--out", o_str]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("compare_report.json"));
    assert_eq!(r["verdicts"]["finite"], true);
    assert_eq!(r["pinn_step"], 12);

    let slice = std::fs::read(out.join("slice_t5.csv")).unwrap();
    std::fs::remove_file(out.join("slice_t5.csv")).unwrap();
    let o = abh(&["emit", "--config", &cfg, "--out", o_str]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("slice_t5.csv")).unwrap(), slice);
}

#[test]
fn oracle_non_convergence_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"fd_n_a": 21, "fd_n_z": 3, "fd_n_t": 11, "fd_max_outer": 1, "fd_tol": 1e-12}"#);
    let o = abh(&["fd", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}
