use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::netsim::{
    assemble_output_coupled, integrate_observed, NetworkSystem, OutputAgent, SolverOptions, VectorField,
};

/// Coefficients in ascending powers: `c[0] + c[1] z + c[2] z² + …`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    /// Coefficient-wise mean.
    pub fn mean(polys: &[&Polynomial]) -> Polynomial {
        let len = polys.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let mut out = vec![0.0; len];
        for p in polys {
            for (o, c) in out.iter_mut().zip(&p.0) {
                *o += c;
            }
        }
        let n = polys.len().max(1) as f64;
        Polynomial(out.into_iter().map(|c| c / n).collect())
    }
}

/// `z̈ + f(z) ż + g(z) = u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LienardAgent {
    pub f: Polynomial,
    pub g: Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LienardConfig {
    /// Output `o = a z + ż`.
    pub a: f64,
    pub agents: Vec<LienardAgent>,
}

impl LienardConfig {
    pub fn averaged(&self) -> LienardAgent {
        let fs: Vec<_> = self.agents.iter().map(|a| &a.f).collect();
        let gs: Vec<_> = self.agents.iter().map(|a| &a.g).collect();
        LienardAgent {
            f: Polynomial::mean(&fs),
            g: Polynomial::mean(&gs),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Liénard output gain a must be positive, got {}",
                self.a
            )));
        }
        if self.agents.is_empty() {
            return Err(Error::EmptyGraph);
        }
        Ok(())
    }
}

/// The nominal pacemaker cell `z̈ + (1.45z² − 2.465z − 0.551)ż + z = 0`.
pub fn pacemaker_nominal() -> LienardAgent {
    LienardAgent {
        f: Polynomial(PACEMAKER_NOMINAL.to_vec()),
        g: Polynomial(vec![0.0, 1.0]),
    }
}

/// Damping coefficients of the nominal pacemaker, ascending powers.
pub const PACEMAKER_NOMINAL: [f64; 3] = [-0.551, -2.465, 1.45];

/// `N` perturbed pacemaker cells with `Δ ~ scale·N(0, 1)`, output gain 1.
pub fn pacemaker_config<R: Rng + ?Sized>(n: usize, rng: &mut R, scale: f64) -> LienardConfig {
    let agents = (0..n)
        .map(|_| {
            let d: [f64; 6] = std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal));
            LienardAgent {
                f: Polynomial(vec![-(0.551 + d[3]), -(2.465 + d[2]), 1.45 + d[1], 0.1 * d[0]]),
                g: Polynomial(vec![0.0, 1.0 + d[4], 0.1 * d[5]]),
            }
        })
        .collect();
    LienardConfig { a: 1.0, agents }
}

/// Agents in `(z, y = a z + ż)` coordinates.
pub fn lienard_agents(cfg: &LienardConfig) -> Result<Vec<OutputAgent>> {
    cfg.validate()?;
    let a = cfg.a;
    Ok(cfg
        .agents
        .iter()
        .map(|agent| {
            let (f, g) = (agent.f.clone(), agent.g.clone());
            OutputAgent::new(
                1,
                1,
                move |_, z, y, out| out[0] = -a * z[0] + y[0],
                move |_, y, z, out| {
                    let (z, y) = (z[0], y[0]);
                    let fz = f.eval(z);
                    out[0] = -a * a * z + a * y - fz * y + a * fz * z - g.eval(z);
                },
            )
        })
        .collect())
}

/// Averaged system projected to the synchronization manifold, state `(ẑ, s)`.
pub fn projected_field(a: f64, avg: &LienardAgent) -> VectorField {
    let avg = avg.clone();
    VectorField::new(2, "lienard-projected", move |_, x, out| {
        let (z, s) = (x[0], x[1]);
        let f = avg.f.eval(z);
        out[0] = -a * z + s;
        out[1] = -a * a * z + a * s - f * s + a * f * z - avg.g.eval(z);
    })
}

#[derive(Debug, Clone)]
pub struct LienardScenario {
    pub system: NetworkSystem,
    pub agents: Vec<OutputAgent>,
    pub averaged: LienardAgent,
    pub projected: VectorField,
}

pub fn lienard_scenario(cfg: &LienardConfig, g: &Graph, k: f64) -> Result<LienardScenario> {
    let agents = lienard_agents(cfg)?;
    let system = assemble_output_coupled(&agents, &DMatrix::identity(1, 1), g, k)?;
    let averaged = cfg.averaged();
    Ok(LienardScenario {
        system,
        agents,
        projected: projected_field(cfg.a, &averaged),
        averaged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitCycle {
    pub period: f64,
    /// Half the peak-to-peak range of `ẑ` over the last period.
    pub amplitude: f64,
    /// State where the orbit crosses the section.
    pub crossing: [f64; 2],
}

/// Settles the planar field from `x0` and looks for a periodic orbit on the
/// section `s = a ẑ` (crossed with `ż` increasing). A cycle is declared once
/// two successive crossings after `transient` lie within `1e−4` and the
/// orbit between them still swings by more than `1e−3`.
pub fn detect_limit_cycle(
    field: &VectorField,
    a: f64,
    x0: [f64; 2],
    transient: f64,
    t_max: f64,
) -> Result<Option<LimitCycle>> {
    if field.dim() != 2 {
        return Err(Error::DimensionMismatch(
            "limit-cycle detection needs a planar field".into(),
        ));
    }
    let sys = NetworkSystem::single(field);
    let mut prev: Option<(f64, [f64; 2])> = None;
    let mut crossings: Vec<(f64, [f64; 2], f64, f64)> = Vec::new();
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    integrate_observed(
        &sys,
        &x0,
        0.0,
        t_max,
        &SolverOptions::rk4(1e-3).with_output_dt(t_max),
        |t, x| {
            let now = [x[0], x[1]];
            zmin = zmin.min(now[0]);
            zmax = zmax.max(now[0]);
            if let Some((tp, p)) = prev {
                let (g0, g1) = (p[1] - a * p[0], now[1] - a * now[0]);
                if g0 < 0.0 && g1 >= 0.0 {
                    let w = g0 / (g0 - g1);
                    let tc = tp + w * (t - tp);
                    let xc = [p[0] + w * (now[0] - p[0]), p[1] + w * (now[1] - p[1])];
                    crossings.push((tc, xc, zmin, zmax));
                    zmin = f64::INFINITY;
                    zmax = f64::NEG_INFINITY;
                }
            }
            prev = Some((t, now));
        },
    )?;
    let settled: Vec<_> = crossings.iter().filter(|c| c.0 > transient).collect();
    for pair in settled.windows(2) {
        let (a0, a1) = (pair[0], pair[1]);
        let d = ((a0.1[0] - a1.1[0]).powi(2) + (a0.1[1] - a1.1[1]).powi(2)).sqrt();
        // Excludes spirals collapsing onto an equilibrium.
        let swing = 0.5 * (a1.3 - a1.2);
        if d < 1e-4 && swing > 1e-3 {
            let last = settled.last().expect("nonempty");
            let before = settled[settled.len() - 2];
            return Ok(Some(LimitCycle {
                period: last.0 - before.0,
                amplitude: 0.5 * (last.3 - last.2),
                crossing: last.1,
            }));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blended::blended_output;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut ChaCha8Rng, n: usize, a: f64) -> LienardConfig {
        LienardConfig {
            a,
            agents: (0..n)
                .map(|_| LienardAgent {
                    f: Polynomial((0..3).map(|_| rng.random_range(-2.0..2.0)).collect()),
                    g: Polynomial((0..2).map(|_| rng.random_range(-2.0..2.0)).collect()),
                })
                .collect(),
        }
    }

    #[test]
    fn polynomial_evaluation_and_mean() {
        let p = Polynomial(vec![1.0, -2.0, 3.0]);
        assert_eq!(p.eval(2.0), 1.0 - 4.0 + 12.0);
        let q = Polynomial(vec![0.0, 3.0]);
        let r = Polynomial(vec![0.0, 1.0]);
        assert_eq!(Polynomial::mean(&[&r, &q]), Polynomial(vec![0.0, 2.0]));
    }

    #[test]
    fn realization_matches_second_order_form() {
        // With y = a z + ż the realization reproduces z̈ = −f(z)ż − g(z) + u.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = random_config(&mut rng, 1, 1.0);
        let agents = lienard_agents(&cfg).unwrap();
        let (z, zdot) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let y = cfg.a * z + zdot;
        let mut dz = [0.0];
        let mut dy = [0.0];
        agents[0].eval_g(0.0, &[z], &[y], &mut dz);
        agents[0].eval_h(0.0, &[y], &[z], &mut dy);
        assert_relative_eq!(dz[0], zdot, epsilon = 1e-12);
        let zddot = dy[0] - cfg.a * dz[0];
        let expected = -cfg.agents[0].f.eval(z) * zdot - cfg.agents[0].g.eval(z);
        assert_relative_eq!(zddot, expected, epsilon = 1e-12);
    }

    #[test]
    fn network_rhs_matches_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = random_config(&mut rng, 3, 1.0);
        let g = Graph::path(3).unwrap();
        let sc = lienard_scenario(&cfg, &g, 7.0).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = sc.system.eval_vec(0.0, &x);
        for i in 0..3 {
            let (z, y) = (x[2 * i], x[2 * i + 1]);
            let f = cfg.agents[i].f.eval(z);
            let coupling: f64 = g.neighbors(i).iter().map(|&(j, w)| w * (x[2 * j + 1] - y)).sum();
            assert_relative_eq!(out[2 * i], -z + y, epsilon = 1e-12);
            let expected = -z + y - f * y + f * z - cfg.agents[i].g.eval(z) + 7.0 * coupling;
            assert_relative_eq!(out[2 * i + 1], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn blended_output_matches_lienard_display() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = random_config(&mut rng, 4, 1.3);
        let a = cfg.a;
        let bl = blended_output(&lienard_agents(&cfg).unwrap()).unwrap();
        assert_eq!(bl.dim(), 5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = x[4];
            let out = bl.reduced_field.eval_vec(0.0, &x);
            let mut mean_z = 0.0;
            let mut mean_f = 0.0;
            let mut mean_fz = 0.0;
            let mut mean_g = 0.0;
            for i in 0..4 {
                let z = x[i];
                assert_relative_eq!(out[i], -a * z + s, epsilon = 1e-9);
                mean_z += z / 4.0;
                mean_f += cfg.agents[i].f.eval(z) / 4.0;
                mean_fz += cfg.agents[i].f.eval(z) * z / 4.0;
                mean_g += cfg.agents[i].g.eval(z) / 4.0;
            }
            let expected = -a * a * mean_z + a * s - mean_f * s + a * mean_fz - mean_g;
            assert_relative_eq!(out[4], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_agent_projection_is_its_own_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = random_config(&mut rng, 1, 0.7);
        let sc = lienard_scenario(&cfg, &Graph::complete(1).unwrap(), 1.0).unwrap();
        let x = [0.3, -0.4];
        assert_eq!(sc.projected.eval_vec(0.0, &x), sc.system.eval_vec(0.0, &x));
    }

    #[test]
    fn nominal_pacemaker_has_a_limit_cycle() {
        let cfg = LienardConfig {
            a: 1.0,
            agents: vec![pacemaker_nominal()],
        };
        let field = projected_field(1.0, &cfg.averaged());
        let cycle = detect_limit_cycle(&field, 1.0, [1.0, 2.0], 50.0, 200.0)
            .unwrap()
            .expect("limit cycle");
        assert!(cycle.period > 1.0 && cycle.period < 30.0, "{cycle:?}");
        assert!(cycle.amplitude > 0.1);
    }

    #[test]
    fn damped_oscillator_has_no_limit_cycle() {
        let damped = LienardAgent {
            f: Polynomial(vec![1.0]),
            g: Polynomial(vec![0.0, 1.0]),
        };
        let field = projected_field(1.0, &damped);
        assert!(detect_limit_cycle(&field, 1.0, [1.0, 2.0], 50.0, 150.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn zero_scale_pacemakers_are_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = pacemaker_config(5, &mut rng, 0.0);
        let avg = cfg.averaged();
        for z in [-1.0, 0.2, 2.0] {
            assert_relative_eq!(avg.f.eval(z), pacemaker_nominal().f.eval(z), epsilon = 1e-12);
            assert_relative_eq!(avg.g.eval(z), z, epsilon = 1e-12);
        }
    }
}
