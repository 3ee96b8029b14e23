//! Monte-Carlo experiment on networks of perturbed pacemaker cells.

use std::path::Path;

use blendnet_core::graph::Graph;
use blendnet_core::netsim::{integrate_observed, SolverOptions};
use blendnet_core::recipes::{lienard_scenario, pacemaker_config, LienardConfig, PACEMAKER_NOMINAL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreContext, HarnessError, Result};
use crate::output::{create_dir, csv_finish, csv_row, csv_writer, write_json};

pub const PACEMAKER_FILE: &str = "pacemaker.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacemakerConfig {
    pub n_agents: usize,
    pub seed: u64,
    pub k: f64,
    /// Standard deviation of every perturbation `Δ_i^l`.
    pub scale: f64,
    pub trials: usize,
    pub t_end: f64,
    /// Samples before this time are ignored by the statistics.
    pub transient: f64,
    /// Spacing of the stored network-mean waveform.
    pub sample_dt: f64,
    pub h: f64,
    /// Step cap relative to the `k·N` synchronization mode.
    pub stiffness_factor: f64,
}

impl PacemakerConfig {
    pub fn new(n_agents: usize, trials: usize, seed: u64) -> Self {
        PacemakerConfig {
            n_agents,
            seed,
            k: 50.0,
            scale: 1.0,
            trials,
            t_end: 60.0,
            transient: 20.0,
            sample_dt: 0.01,
            h: 1e-3,
            stiffness_factor: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.n_agents > 0
            && self.trials > 0
            && self.k > 0.0
            && self.scale >= 0.0
            && self.transient >= 0.0
            && self.t_end > self.transient
            && self.sample_dt > 0.0
            && self.h > 0.0;
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!(
                "invalid pacemaker configuration {self:?}"
            )))
        }
    }

    /// Generator for trial `trial`; trial `m` sees the same stream for every `N`.
    pub fn trial_rng(&self, trial: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum TrialStatus {
    Oscillating,
    /// Fewer than two peaks after the transient.
    Settled,
    /// Integration failed, e.g. finite escape.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub status: TrialStatus,
    /// Mean peak height of the network-mean `z` after the transient.
    pub amplitude: Option<f64>,
    /// Mean spacing of those peaks.
    pub period: Option<f64>,
    /// Network means `Δ̄^1 … Δ̄^6` of the perturbations.
    pub delta_bar: [f64; 6],
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub mean_z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacemakerReport {
    pub config: PacemakerConfig,
    pub trials: Vec<TrialResult>,
    pub amplitude_std: Option<f64>,
    pub period_std: Option<f64>,
    /// `amplitude_std + period_std` over oscillating trials.
    pub spread: Option<f64>,
    pub failed: usize,
}

/// `Δ̄^l` recovered from the coefficient means.
pub fn delta_bar(cfg: &LienardConfig) -> [f64; 6] {
    let avg = cfg.averaged();
    let f = |i: usize| avg.f.0.get(i).copied().unwrap_or(0.0);
    let g = |i: usize| avg.g.0.get(i).copied().unwrap_or(0.0);
    [
        10.0 * f(3),
        f(2) - PACEMAKER_NOMINAL[2],
        -f(1) + PACEMAKER_NOMINAL[1],
        -f(0) + PACEMAKER_NOMINAL[0],
        g(1) - 1.0,
        10.0 * g(2),
    ]
}

/// Peaks of a sampled signal, refined by a parabola through each local
/// maximum: `(time, height)`.
pub fn peaks(times: &[f64], z: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 1..z.len().saturating_sub(1) {
        let (a, b, c) = (z[i - 1], z[i], z[i + 1]);
        if b > a && b >= c {
            let denom = a - 2.0 * b + c;
            let off = if denom < 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
            let dt = times[i + 1] - times[i];
            out.push((times[i] + off * dt, b - 0.25 * (a - c) * off));
        }
    }
    out
}

fn std_dev(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn run_trial(cfg: &PacemakerConfig, graph: &Graph, trial: usize) -> Result<TrialResult> {
    let lienard = pacemaker_config(cfg.n_agents, &mut cfg.trial_rng(trial), cfg.scale);
    let sc = lienard_scenario(&lienard, graph, cfg.k).context(|| format!("pacemaker trial {trial}"))?;
    // z(0) = ż(0) = 1, so y(0) = a·z(0) + ż(0).
    let x0: Vec<f64> = (0..cfg.n_agents).flat_map(|_| [1.0, lienard.a + 1.0]).collect();
    let n = cfg.n_agents as f64;
    let mut times = vec![0.0];
    let mut mean_z = vec![1.0];
    let mut next = cfg.sample_dt;
    let opts = SolverOptions::rk4(cfg.h)
        .with_output_dt(cfg.t_end)
        .with_stiffness_factor(cfg.stiffness_factor);
    let outcome = integrate_observed(&sc.system, &x0, 0.0, cfg.t_end, &opts, |t, x| {
        if t + 1e-12 >= next {
            times.push(t);
            mean_z.push(x.iter().step_by(2).sum::<f64>() / n);
            next += cfg.sample_dt;
        }
    });
    let mut result = TrialResult {
        trial,
        status: TrialStatus::Oscillating,
        amplitude: None,
        period: None,
        delta_bar: delta_bar(&lienard),
        times,
        mean_z,
    };
    match outcome {
        Err(e) if e.is_numerical() => {
            result.status = TrialStatus::Failed(e.to_string());
            return Ok(result);
        }
        Err(e) => return Err(HarnessError::core(format!("pacemaker trial {trial}"), e)),
        Ok(_) => {}
    }
    let start = result.times.partition_point(|&t| t < cfg.transient);
    let pk = peaks(&result.times[start..], &result.mean_z[start..]);
    if pk.len() < 2 {
        result.status = TrialStatus::Settled;
        return Ok(result);
    }
    result.amplitude = Some(pk.iter().map(|p| p.1).sum::<f64>() / pk.len() as f64);
    result.period = Some((pk[pk.len() - 1].0 - pk[0].0) / (pk.len() - 1) as f64);
    Ok(result)
}

/// All trials on the all-to-all graph from `z_i(0) = ż_i(0) = 1`.
pub fn pacemaker_experiment(cfg: &PacemakerConfig) -> Result<PacemakerReport> {
    cfg.validate()?;
    let graph = Graph::complete(cfg.n_agents).context(|| "pacemaker graph".into())?;
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &graph, t))
        .collect::<Result<_>>()?;
    let amps: Vec<f64> = trials.iter().filter_map(|t| t.amplitude).collect();
    let periods: Vec<f64> = trials.iter().filter_map(|t| t.period).collect();
    let amplitude_std = std_dev(&amps);
    let period_std = std_dev(&periods);
    Ok(PacemakerReport {
        config: *cfg,
        failed: trials
            .iter()
            .filter(|t| matches!(t.status, TrialStatus::Failed(_)))
            .count(),
        spread: amplitude_std.zip(period_std).map(|(a, p)| a + p),
        amplitude_std,
        period_std,
        trials,
    })
}

/// `report.json` plus the per-trial waveforms as `trial,t,z`.
pub fn write_report(report: &PacemakerReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(REPORT_FILE), report)?;
    let path = dir.join(PACEMAKER_FILE);
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["trial", "t", "z"])?;
    for tr in &report.trials {
        let id = tr.trial.to_string();
        for (t, z) in tr.times.iter().zip(&tr.mean_z) {
            csv_row(&mut w, &path, [id.clone(), t.to_string(), z.to_string()])?;
        }
    }
    csv_finish(w, &path)
}
