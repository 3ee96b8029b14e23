use blendnet::pacemaker::{delta_bar, pacemaker_experiment, TrialStatus};
use blendnet::PacemakerConfig;
use blendnet_core::recipes::pacemaker_config;

#[test]
fn unperturbed_cells_have_no_spread() {
    let mut cfg = PacemakerConfig::new(5, 3, 11);
    cfg.scale = 0.0;
    cfg.t_end = 50.0;
    let report = pacemaker_experiment(&cfg).unwrap();
    assert!(report.trials.iter().all(|t| t.status == TrialStatus::Oscillating));
    assert_eq!(report.spread, Some(0.0));
    let first = &report.trials[0];
    for t in &report.trials[1..] {
        assert_eq!(t.mean_z, first.mean_z);
    }
}

#[test]
fn perturbation_means_have_variance_one_over_n() {
    const DRAWS: usize = 200;
    let n = 25;
    let cfg = PacemakerConfig::new(n, DRAWS, 2024);
    let bars: Vec<[f64; 6]> = (0..DRAWS)
        .map(|m| delta_bar(&pacemaker_config(n, &mut cfg.trial_rng(m), 1.0)))
        .collect();
    let expected = 1.0 / n as f64;
    // Sample variance of a normal sample: sd ≈ σ²·√(2/(m−1)).
    let tol = 3.0 * expected * (2.0 / (DRAWS as f64 - 1.0)).sqrt();
    for l in 0..6 {
        let v: Vec<f64> = bars.iter().map(|b| b[l]).collect();
        let mean = v.iter().sum::<f64>() / DRAWS as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (DRAWS as f64 - 1.0);
        assert!(
            (var - expected).abs() < tol,
            "Δ̄^{}: variance {var}, expected {expected} ± {tol}",
            l + 1
        );
        assert!(
            mean.abs() < 3.0 * (expected / DRAWS as f64).sqrt(),
            "Δ̄^{}: mean {mean}",
            l + 1
        );
    }
}

#[test]
fn experiment_is_reproducible() {
    let cfg = PacemakerConfig::new(4, 3, 9);
    let a = pacemaker_experiment(&cfg).unwrap();
    let b = pacemaker_experiment(&cfg).unwrap();
    assert_eq!(a, b);
}
