use std::fs;
use std::path::{Path, PathBuf};

use blendnet::config::{EventAction, EventConfig};
use blendnet::output::{write_artifacts, TRAJECTORY_FILE};
use blendnet::{emit_plots, run, sweep_gain, verify, HarnessError, ScenarioConfig};
use blendnet_core::graph::Graph;
use blendnet_core::netsim::integrate;
use blendnet_core::recipes::counting_scenario;

fn scenario(name: &str) -> ScenarioConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect();
    ScenarioConfig::load(&path).unwrap()
}

fn trajectory_bytes(cfg: &ScenarioConfig, dir: &Path) -> Vec<u8> {
    let out = run(cfg).unwrap();
    write_artifacts(cfg, &out, dir).unwrap();
    fs::read(dir.join(TRAJECTORY_FILE)).unwrap()
}

#[test]
fn every_sample_scenario_loads_and_verifies() {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios"].iter().collect();
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ScenarioConfig::load(&path).unwrap();
        let report = verify(&cfg).unwrap();
        assert!(report.passed(), "{}: {:?}", path.display(), report.failures());
        count += 1;
    }
    assert!(count >= 10);
}

#[test]
fn counting_ring_decodes_to_five() {
    let out = run(&scenario("counting_ring5.json")).unwrap();
    assert_eq!(out.summary.decoded, Some(serde_json::json!([5, 5, 5, 5, 5])));
    assert!(out.summary.warnings.is_empty());
}

#[test]
fn empty_schedule_is_a_plain_integration() {
    let cfg = scenario("counting_ring5.json");
    let out = run(&cfg).unwrap();
    assert_eq!(out.segments.len(), 1);
    let sc = counting_scenario(&Graph::ring(5).unwrap(), 200.0).unwrap();
    let direct = integrate(&sc.system, &[0.0; 5], 0.0, 30.0, &cfg.solver.options()).unwrap();
    let ours = &out.segments[0].traj;
    assert_eq!(ours.times, direct.times);
    assert_eq!(ours.states, direct.states);
}

#[test]
fn losing_the_anchor_is_flagged() {
    let mut cfg = scenario("counting_leave.json");
    cfg.events = vec![EventConfig {
        t: 25.0,
        action: EventAction::Leave { agent: 1 },
    }];
    let out = run(&cfg).unwrap();
    assert!(out.summary.warnings.iter().any(|w| w.contains("anchor agent 1 left")));
    assert!(out.summary.oracle.is_none());
    let report = verify(&cfg).unwrap();
    assert!(report.failures().iter().any(|c| c.name == "anchor_retained"));
}

#[test]
fn leave_that_disconnects_the_graph_aborts() {
    let mut cfg = scenario("counting_ring5.json");
    cfg.graph = serde_json::from_str(r#"{ "type": "path", "n": 5 }"#).unwrap();
    cfg.events = vec![EventConfig {
        t: 10.0,
        action: EventAction::Leave { agent: 3 },
    }];
    match run(&cfg) {
        Err(HarnessError::Core { source, .. }) => {
            assert!(matches!(source, blendnet_core::Error::DisconnectedGraph))
        }
        other => panic!("expected a disconnected graph, got {other:?}"),
    }
    assert!(!verify(&cfg).unwrap().passed());
}

#[test]
fn plug_and_play_keeps_counting() {
    let out = run(&scenario("plug_and_play_join.json")).unwrap();
    let ev = &out.summary.events;
    assert_eq!(ev.len(), 2);
    assert_eq!((ev[0].action, ev[0].agent), ("join", 5));
    assert_eq!((ev[1].action, ev[1].agent), ("leave", 3));
    assert_eq!(
        out.summary.agents.iter().map(|a| a.id).collect::<Vec<_>>(),
        vec![1, 2, 4, 5]
    );
    let before_leave = &out.segments[1];
    let last = before_leave.traj.final_state();
    assert!(last.iter().all(|x| (x - 5.0).abs() < 0.5), "{last:?}");
    assert_eq!(out.summary.decoded, Some(serde_json::json!([4, 4, 4, 4])));
}

#[test]
fn funnel_joiner_starts_strictly_inside() {
    let mut cfg = scenario("edge_funnel_k4.json");
    cfg.output.plots = false;
    cfg.events = vec![EventConfig {
        t: 8.0,
        action: EventAction::Join {
            agent: serde_json::json!({ "a": 1.0, "c": 9.0 }),
            links: serde_json::from_str("[1, 3]").unwrap(),
            initial: Some(vec![40.0]),
        },
    }];
    let out = run(&cfg).unwrap();
    let joined = &out.segments[1];
    let first_t = joined.funnel[0].t;
    assert_eq!(first_t, 8.0);
    let at_event: Vec<_> = joined.funnel.iter().filter(|s| s.t == first_t).collect();
    assert_eq!(at_event.len(), 8);
    for s in &at_event {
        assert!(s.nu.abs() < s.psi, "{s:?}");
    }
    for s in &joined.funnel {
        assert!(s.nu.abs() < s.psi, "{s:?}");
    }
    assert!(out.summary.max_funnel_ratio.unwrap() < 1.0);
}

#[test]
fn single_gain_sweep_matches_the_run() {
    let cfg = scenario("least_squares_random.json");
    let out = run(&cfg).unwrap();
    let rows = sweep_gain(&cfg, &[1000.0]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].k, 1000.0);
    assert_eq!(rows[0].oracle_error, out.summary.oracle.unwrap().error);
    assert_eq!(rows[0].sync_error, out.summary.sync_error);
}

#[test]
fn least_squares_sweep_error_decreases() {
    let cfg = scenario("least_squares_random.json");
    let rows = sweep_gain(&cfg, &[10.0, 100.0, 1000.0]).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].oracle_error <= 1.1 * w[0].oracle_error, "{rows:?}");
    }
}

#[test]
fn runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        "counting_random10.json",
        "edge_funnel_k4.json",
        "observer_full.json",
        "plug_and_play_join.json",
    ] {
        let cfg = scenario(name);
        let a = trajectory_bytes(&cfg, &tmp.path().join("a"));
        let b = trajectory_bytes(&cfg, &tmp.path().join("b"));
        assert!(!a.is_empty());
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn random_initial_states_are_reproducible() {
    let mut cfg = scenario("median_k5.json");
    cfg.initial = serde_json::from_str(r#"{ "type": "random_box", "low": -3, "high": 12, "seed": 5 }"#).unwrap();
    cfg.solver.t_end = 2.0;
    let tmp = tempfile::tempdir().unwrap();
    let a = trajectory_bytes(&cfg, &tmp.path().join("a"));
    let b = trajectory_bytes(&cfg, &tmp.path().join("b"));
    assert!(a == b);
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let cfg = scenario("counting_random10.json");
    let ks = [50.0, 100.0, 200.0, 400.0];
    let with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sweep_gain(&cfg, &ks).unwrap())
    };
    let serial = with(1);
    let parallel = with(4);
    assert_eq!(serial, parallel);
}

#[test]
fn plots_are_written_for_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario("edge_funnel_k4.json");
    let out = run(&cfg).unwrap();
    write_artifacts(&cfg, &out, tmp.path()).unwrap();
    let written = emit_plots(tmp.path()).unwrap();
    let names: Vec<_> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_owned())
        .collect();
    assert_eq!(names, ["trajectory.svg", "funnel.svg"]);
    for p in written {
        let svg = fs::read_to_string(p).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
