use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn blendnet(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blendnet"))
        .args(args)
        .env("BLENDNET_OUT_DIR", out_dir)
        .output()
        .unwrap()
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect();
    p.to_str().unwrap().to_owned()
}

#[test]
fn simulate_writes_run_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blendnet(tmp.path(), &["simulate", &scenario("counting_ring5.json")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,agent,component,value\n"));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["decoded"], serde_json::json!([5, 5, 5, 5, 5]));
}

#[test]
fn sweep_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blendnet(
        tmp.path(),
        &["sweep", "--k", "50,100", &scenario("counting_ring5.json")],
    );
    assert_eq!(out.status.code(), Some(0));
    let table = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("k,oracle_error,sync_error"));

    let run_dir = tmp.path().join("run");
    assert!(blendnet(&run_dir, &["simulate", &scenario("counting_ring5.json")])
        .status
        .success());
    let out = blendnet(tmp.path(), &["plot", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(run_dir.join("trajectory.svg").exists());
}

#[test]
fn pacemaker_experiment_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = blendnet(
        tmp.path(),
        &[
            "experiment",
            "pacemaker",
            "--n",
            "3",
            "--trials",
            "2",
            "--seed",
            "1",
            "--t-end",
            "30",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("report.json").exists());
    assert!(tmp.path().join("pacemaker.csv").exists());
}

#[test]
fn validation_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{ "version": 7 }"#).unwrap();
    let out = blendnet(tmp.path(), &["simulate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = blendnet(tmp.path(), &["verify", &scenario("counting_ring5.json")]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS anchor_present"));

    let no_anchor = tmp.path().join("leave.json");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scenario("counting_leave.json")).unwrap()).unwrap();
    cfg["events"][0]["agent"] = 1.into();
    fs::write(&no_anchor, cfg.to_string()).unwrap();
    let out = blendnet(tmp.path(), &["verify", no_anchor.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL anchor_retained"));
}

#[test]
fn numerical_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("escape.json");
    fs::write(
        &cfg,
        r#"{
            "version": 1,
            "recipe": { "name": "affine", "a": [-1, -1], "c": [0, 0] },
            "graph": { "type": "path", "n": 2 },
            "coupling": { "kind": "state", "k": 1 },
            "solver": { "h": 0.1, "t_end": 1000 },
            "initial": { "type": "constant", "value": 1 }
        }"#,
    )
    .unwrap();
    let out = blendnet(tmp.path(), &["simulate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
