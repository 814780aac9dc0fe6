use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector2;
use scmpc::cli::{csv_header, recompute_from_csv};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scmpc")).args(args).output().expect("binary runs")
}

fn simulate(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    scmpc(&args)
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn csv_files(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn nominal_run_writes_exact_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(&configs().join("nominal.json"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files = csv_files(dir.path());
    assert_eq!(files.len(), 1);
    let text = fs::read_to_string(&files[0]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,x3,zeta,u1,u2,omega_r,omega_l,v1,v2,H0,dist0,cost,sqp_iters,solve_ms");
    assert_eq!(csv_header(1).join(","), "t,x1,x2,x3,zeta,u1,u2,omega_r,omega_l,v1,v2,H0,dist0,cost,sqp_iters,solve_ms");
    // every float field carries at least 12 significant digits
    let row: Vec<&str> = lines.nth(3).unwrap().split(',').collect();
    for (i, field) in row.iter().enumerate().filter(|(i, _)| *i != 14) {
        let mantissa = field.split('e').next().unwrap().replace(['-', '.'], "");
        assert!(mantissa.len() >= 12, "column {i}: {field}");
    }
}

#[test]
fn summary_is_recomputable_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(&configs().join("gamma_sweep.json"), dir.path(), &["--sweep"]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(dir.path());
    for run in s["runs"].as_array().unwrap() {
        let path = dir.path().join(run["file"].as_str().unwrap());
        let (min_d, final_err) = recompute_from_csv(&path, &Vector2::zeros()).unwrap();
        assert!((min_d - run["min_distance"].as_f64().unwrap()).abs() <= 1e-9);
        assert!((final_err - run["final_position_error"].as_f64().unwrap()).abs() <= 1e-9);
    }
}

#[test]
fn gamma_sweep_reports_monotone_clearance() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(&configs().join("gamma_sweep.json"), dir.path(), &["--sweep"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(csv_files(dir.path()).len(), 6);
    let s = summary(dir.path());
    let mono = &s["monotonicity"][0];
    assert_eq!(mono["points"].as_array().unwrap().len(), 6);
    assert_eq!(mono["nonincreasing"], true);
}

#[test]
fn cbf_deviates_before_euclid_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(&configs().join("cbf_vs_euclid.json"), dir.path(), &["--sweep"]);
    assert_eq!(out.status.code(), Some(0));
    let d = &summary(dir.path())["deviation"][0];
    assert_eq!(d["cbf_earlier"], true);
    assert!(d["cbf_step"].as_u64().unwrap() < d["euclid_step"].as_u64().unwrap());
}

#[test]
fn overrides_replace_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(
        &configs().join("nominal.json"),
        dir.path(),
        &["--gamma", "0.5", "--horizon", "10", "--mode", "euclid"],
    );
    assert_eq!(out.status.code(), Some(0));
    let run = &summary(dir.path())["runs"][0];
    assert_eq!(run["gamma"], 0.5);
    assert_eq!(run["horizon"], 10);
    assert_eq!(run["mode"], "euclid");
}

#[test]
fn config_errors_exit_3_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"mpc": {"gamma": 1.5}}"#, "mpc.gamma"),
        (r#"{"mpc": {"horizon": 0}}"#, "mpc.horizon"),
        (r#"{"mpc": {"gama": 0.1}}"#, "mpc.gama"),
        (r#"{"noise": {"variance": -1}}"#, "noise.variance"),
        (r#"{"obstacles": [{"x_obs": 7, "y_obs": 7, "r_obs": 1}]}"#, "obstacles[0]"),
        (r#"{"scenario": {"mode": "pid"}}"#, "scenario.mode"),
        (r#"{"sweep": {"gamma": [0.1, 2.0]}}"#, "sweep.gamma[1]"),
    ];
    for (i, (text, key)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.json"));
        fs::write(&path, text).unwrap();
        let out = simulate(&path, &dir.path().join("out"), &["--sweep"]);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(3), "{text}: {stderr}");
        assert!(stderr.contains(key), "{text}: {stderr}");
    }
    let out = simulate(&configs().join("nominal.json"), &dir.path().join("out"), &["--gamma", "0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--gamma"));
    let out = simulate(&dir.path().join("missing.json"), &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn infeasible_abort_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // a measured state that jumps towards the obstacle leaves no feasible input
    let out = simulate(&configs().join("noise.json"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let run = &summary(dir.path())["runs"][0];
    assert!(run["aborted_at"].as_u64().is_some());
    assert_eq!(summary(dir.path())["all_succeeded"], false);
}

#[test]
fn seeds_are_reproducible_and_thread_count_is_irrelevant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("noise.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    simulate(&cfg, &a, &["--seed", "5"]);
    let out = Command::new(env!("CARGO_BIN_EXE_scmpc"))
        .env("SCMPC_THREADS", "1")
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "5"])
        .output()
        .unwrap();
    assert!(out.status.code().is_some());
    let strip = |p: &Path| -> Vec<String> {
        let text = fs::read_to_string(p).unwrap();
        // drop the timing column
        text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    let fa = csv_files(&a);
    let fb = csv_files(&b);
    assert_eq!(strip(&fa[0]), strip(&fb[0]));
}

#[test]
fn verify_subcommand_passes() {
    let out = scmpc(&["verify"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("10/10 checks passed"));
    assert!(!stdout.contains("FAIL"));
    let out = scmpc(&["verify", "--config", configs().join("nominal.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
}
