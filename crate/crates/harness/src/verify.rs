//! Invariant suite run before committing to a long simulation.

use blendnet_core::blended::{blended_state, build_decomposition, contraction_estimate, EmergentNodeFunnel};
use blendnet_core::graph::spectral;
use blendnet_core::netsim::VectorField;
use blendnet_core::recipes::{
    detect_limit_cycle, observer_full_scenario, observer_rank_deficient_scenario, projected_field, LienardConfig,
    ObserverProblem,
};
use serde::Serialize;

use crate::config::{CouplingConfig, EventAction, RecipeConfig, ScenarioConfig};
use crate::error::Result;
use crate::model::{build_graph, check_population, matrix, AgentModel, Oracle};
use crate::run::{initial_states, initial_system};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name,
            passed,
            detail: detail.into(),
        });
    }

    fn push_result<T>(
        &mut self,
        name: &'static str,
        r: std::result::Result<T, impl std::fmt::Display>,
        ok: impl FnOnce(&T) -> String,
    ) -> Option<T> {
        match r {
            Ok(v) => {
                self.push(name, true, ok(&v));
                Some(v)
            }
            Err(e) => {
                self.push(name, false, e.to_string());
                None
            }
        }
    }
}

/// The scalar blended field should be nonincreasing and change sign
/// across the oracle value.
fn scalar_blended_check(field: &VectorField, target: (f64, f64)) -> (bool, String) {
    let (lo, hi) = target;
    let grid: Vec<f64> = (0..=200)
        .map(|i| lo - 10.0 + (hi - lo + 20.0) * i as f64 / 200.0)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&s| field.eval_vec(0.0, &[s])[0]).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let below = field.eval_vec(0.0, &[lo - 1.0])[0];
    let above = field.eval_vec(0.0, &[hi + 1.0])[0];
    let crosses = below > 0.0 && above < 0.0;
    (
        monotone && crosses,
        format!("nonincreasing: {monotone}, f(target - 1) = {below:.3e}, f(target + 1) = {above:.3e}"),
    )
}

pub fn verify(cfg: &ScenarioConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut report = VerifyReport {
        scenario: cfg.name(),
        checks: Vec::new(),
    };
    let Some(graph) = report.push_result("graph_connected", build_graph(&cfg.graph), |g| {
        let s = spectral(g).expect("built graphs are connected");
        format!(
            "{} agents, λ₂ = {:.4}, λ_max = {:.4}",
            g.n_agents(),
            s.fiedler_value,
            s.lambda_max()
        )
    }) else {
        return Ok(report);
    };

    if cfg.recipe.is_observer() {
        verify_observer(cfg, &graph, &mut report)?;
        return Ok(report);
    }

    let Some(models) = report.push_result(
        "population",
        AgentModel::population(&cfg.recipe).and_then(|m| check_population(&m).map(|_| m)),
        |m| format!("{} agents of dimension {}", m.len(), m[0].dim()),
    ) else {
        return Ok(report);
    };
    let dim = models[0].dim();
    let x0 = report.push_result("initial_state", initial_states(&cfg.initial, models.len(), dim), |x| {
        format!("{} finite components", x.len() * dim)
    });

    if matches!(cfg.recipe, RecipeConfig::Counting { .. } | RecipeConfig::Roster { .. }) {
        let anchors = models.iter().filter(|m| m.is_anchor()).count();
        report.push("anchor_present", anchors == 1, format!("{anchors} anchor agent(s)"));
    }

    if let AgentModel::Lienard { a, .. } = &models[0] {
        let lc = LienardConfig {
            a: *a,
            agents: models
                .iter()
                .filter_map(|m| match m {
                    AgentModel::Lienard { agent, .. } => Some(agent.clone()),
                    _ => None,
                })
                .collect(),
        };
        let field = projected_field(*a, &lc.averaged());
        match detect_limit_cycle(&field, *a, [1.0, a + 1.0], 60.0, 200.0) {
            Ok(Some(c)) => report.push(
                "blended_limit_cycle",
                true,
                format!("period {:.4}, amplitude {:.4}", c.period, c.amplitude),
            ),
            Ok(None) => report.push("blended_limit_cycle", false, "no periodic orbit detected"),
            Err(e) => report.push("blended_limit_cycle", false, e.to_string()),
        }
    } else if matches!(cfg.coupling, CouplingConfig::NodeFunnel { .. }) {
        verify_emergent(cfg, &models, &mut report)?;
    } else {
        let oracle = report.push_result("oracle_available", Oracle::of(&models), |o| match o {
            Some(_) => "centralized solution computed".into(),
            None => "no oracle for this population".into(),
        });
        let fields: Vec<VectorField> = models.iter().map(AgentModel::field).collect::<Result<_>>()?;
        let blended = blended_state(&fields).map_err(|e| crate::HarnessError::core("blended dynamics", e))?;
        match oracle.flatten() {
            Some(Oracle::Point(p)) if dim > 1 => {
                let samples: Vec<(f64, Vec<f64>)> = (-2..=2)
                    .map(|j| (0.0, p.iter().map(|v| v + 5.0 * j as f64).collect()))
                    .collect();
                let r = contraction_estimate(&blended.reduced_field, &samples, None);
                match r {
                    Ok(mu) => report.push("blended_contraction", mu < 0.0, format!("max eig of J + Jᵀ = {mu:.4e}")),
                    Err(e) => report.push("blended_contraction", false, e.to_string()),
                }
            }
            Some(o) => {
                let target = match &o {
                    Oracle::Point(p) => (p[0], p[0]),
                    Oracle::Interval(set) => (set.lo, set.hi),
                    Oracle::Dispatch { agents, .. } => {
                        // Any dual value works as a probe; use the span of J'.
                        let lo = agents
                            .iter()
                            .map(|a| a.cost.derivative(a.lower))
                            .fold(f64::INFINITY, f64::min);
                        let hi = agents
                            .iter()
                            .map(|a| a.cost.derivative(a.upper))
                            .fold(f64::NEG_INFINITY, f64::max);
                        (lo, hi)
                    }
                };
                let (ok, detail) = scalar_blended_check(&blended.reduced_field, target);
                report.push("blended_stable_root", ok, detail);
            }
            None => report.push("blended_stable_root", false, "blended dynamics have no target"),
        }
    }

    if let CouplingConfig::RankDeficient { b: Some(b), .. } = &cfg.coupling {
        let b_list: Vec<_> = b.iter().map(|m| matrix(m, "B_i")).collect::<Result<_>>()?;
        let scale = spectral(&graph).map(|s| s.lambda_max()).unwrap_or(1.0).max(1.0);
        match build_decomposition(&graph, &b_list) {
            Ok(dec) => {
                let r = dec.check();
                report.push(
                    "decomposition",
                    r.holds(1e-9 * scale),
                    format!(
                        "p_s = {}, rank(M) = {}, λ_min(Q) = {:.3e}",
                        r.p_s, r.m_rank, r.q_min_eigenvalue
                    ),
                );
            }
            Err(e) => report.push("decomposition", false, e.to_string()),
        }
    }

    if x0.is_some() && cfg.coupling.is_funnel() {
        let (sys, x) = initial_system(cfg)?;
        let monitor = sys.funnel.as_ref().expect("funnel systems carry a monitor");
        let worst = monitor.max_ratio(cfg.solver.t0, &x);
        report.push(
            "initial_funnel_margins",
            worst < 1.0,
            format!("max |ν|/ψ at t0 = {worst:.4}"),
        );
    }

    if !cfg.events.is_empty() {
        verify_events(cfg, &graph, &models, &mut report);
    }
    Ok(report)
}

/// Node-wise funnels follow the implicit emergent field rather than the
/// plain average; it must stay inside the hull of the agent fields.
fn verify_emergent(cfg: &ScenarioConfig, models: &[AgentModel], report: &mut VerifyReport) -> Result<()> {
    let fields: Vec<VectorField> = models.iter().map(AgentModel::field).collect::<Result<_>>()?;
    let (sys, x) = initial_system(cfg)?;
    let spec = &sys.funnel.as_ref().expect("funnel systems carry a monitor").spec;
    let emergent = match EmergentNodeFunnel::from_spec(&fields, spec) {
        Ok(e) => e,
        Err(e) => {
            report.push("emergent_field", false, e.to_string());
            return Ok(());
        }
    };
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let t0 = cfg.solver.t0;
    let mut worst: f64 = 0.0;
    for i in 0..=50 {
        let s = lo - 5.0 + (hi - lo + 10.0) * i as f64 / 50.0;
        let f: Vec<f64> = fields.iter().map(|fi| fi.eval_vec(t0, &[s])[0]).collect();
        let value = match emergent.value(t0, s) {
            Ok(v) => v,
            Err(e) => {
                report.push("emergent_field", false, format!("s = {s}: {e}"));
                return Ok(());
            }
        };
        let below = f.iter().copied().fold(f64::INFINITY, f64::min) - value;
        let above = value - f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(below).max(above);
    }
    report.push(
        "emergent_field",
        worst <= 1e-9,
        format!("largest excursion outside the agent fields: {worst:.3e}"),
    );
    Ok(())
}

fn verify_events(
    cfg: &ScenarioConfig,
    graph: &blendnet_core::graph::Graph,
    models: &[AgentModel],
    report: &mut VerifyReport,
) {
    let mut g = graph.clone();
    let mut ids: Vec<u32> = (1..=models.len() as u32).collect();
    let mut anchors: Vec<bool> = models.iter().map(AgentModel::is_anchor).collect();
    let mut next = ids.len() as u32 + 1;
    let mut anchor_lost = None;
    for ev in &cfg.events {
        let step = match &ev.action {
            EventAction::Leave { agent } => {
                let idx = ids.iter().position(|i| i == agent).expect("validated event");
                if anchors[idx] {
                    anchor_lost = Some((ev.t, *agent));
                }
                ids.remove(idx);
                anchors.remove(idx);
                g.without_agent(idx)
            }
            EventAction::Join { links, agent, .. } => {
                let l: Vec<_> = links
                    .iter()
                    .map(|l| {
                        (
                            ids.iter().position(|i| *i == l.id()).expect("validated link"),
                            l.weight(),
                        )
                    })
                    .collect();
                ids.push(next);
                next += 1;
                anchors.push(
                    AgentModel::joiner(&cfg.recipe, agent)
                        .map(|m| m.is_anchor())
                        .unwrap_or(false),
                );
                g.with_agent(&l)
            }
        };
        match step {
            Ok(ng) => g = ng,
            Err(e) => {
                report.push("events_keep_graph_connected", false, format!("t = {}: {e}", ev.t));
                return;
            }
        }
    }
    report.push(
        "events_keep_graph_connected",
        true,
        format!("{} events, {} agents at the end", cfg.events.len(), ids.len()),
    );
    if matches!(cfg.recipe, RecipeConfig::Counting { .. } | RecipeConfig::Roster { .. }) {
        match anchor_lost {
            Some((t, id)) => report.push(
                "anchor_retained",
                false,
                format!("anchor agent {id} leaves at t = {t}; the blended dynamics stop contracting"),
            ),
            None => report.push("anchor_retained", true, "the anchor stays for the whole run"),
        }
    }
}

fn verify_observer(cfg: &ScenarioConfig, graph: &blendnet_core::graph::Graph, report: &mut VerifyReport) -> Result<()> {
    let k = cfg.coupling.gain().expect("observer couplings carry a gain");
    match &cfg.recipe {
        RecipeConfig::ObserverFull { s, g, kappa, .. } => {
            let mut p = ObserverProblem::new(
                matrix(s, "S")?,
                g.iter().map(|b| matrix(b, "G_i")).collect::<Result<_>>()?,
                k,
            );
            p.kappa = *kappa;
            report.push_result("observer_full", observer_full_scenario(&p, graph), |sc| {
                format!("κ = {}, stacked A has full column rank {}", sc.kappa, sc.a.ncols())
            });
        }
        RecipeConfig::ObserverRankDeficient { s, g, .. } => {
            let p = ObserverProblem::new(
                matrix(s, "S")?,
                g.iter().map(|b| matrix(b, "G_i")).collect::<Result<_>>()?,
                k,
            );
            if let Some(sc) = report.push_result(
                "observer_rank_deficient",
                observer_rank_deficient_scenario(&p, graph),
                |sc| format!("p_s = {}", sc.decomposition.p_s),
            ) {
                let r = sc.decomposition.check();
                let scale = spectral(graph).map(|s| s.lambda_max()).unwrap_or(1.0).max(1.0);
                report.push(
                    "decomposition",
                    r.holds(1e-9 * scale),
                    format!("rank(M) = {}, λ_min(Q) = {:.3e}", r.m_rank, r.q_min_eigenvalue),
                );
            }
        }
        _ => unreachable!("verify_observer is only called for observer recipes"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(recipe: &str, graph: &str, coupling: &str) -> ScenarioConfig {
        ScenarioConfig::from_json(&format!(
            r#"{{ "version": 1, "recipe": {recipe}, "graph": {graph}, "coupling": {coupling},
                 "solver": {{ "t_end": 10 }} }}"#
        ))
        .unwrap()
    }

    fn names(r: &VerifyReport) -> Vec<&'static str> {
        r.checks.iter().map(|c| c.name).collect()
    }

    #[test]
    fn counting_passes_every_check() {
        let c = cfg(
            r#"{ "name": "counting", "n": 4 }"#,
            r#"{ "type": "ring", "n": 4 }"#,
            r#"{ "kind": "state", "k": 10 }"#,
        );
        let r = verify(&c).unwrap();
        assert!(r.passed(), "{:?}", r.failures());
        assert_eq!(
            names(&r),
            [
                "graph_connected",
                "population",
                "initial_state",
                "anchor_present",
                "oracle_available",
                "blended_stable_root"
            ]
        );
    }

    #[test]
    fn disconnected_graph_stops_early() {
        let c = cfg(
            r#"{ "name": "median", "r": [1, 2, 3] }"#,
            r#"{ "type": "edges", "n": 3, "edges": [[1, 2]] }"#,
            r#"{ "kind": "state", "k": 10 }"#,
        );
        let r = verify(&c).unwrap();
        assert_eq!(names(&r), ["graph_connected"]);
        assert!(!r.passed());
    }

    #[test]
    fn expanding_affine_agents_fail_the_root_check() {
        let c = cfg(
            r#"{ "name": "affine", "a": [-1, 0.5], "c": [0, 1] }"#,
            r#"{ "type": "path", "n": 2 }"#,
            r#"{ "kind": "state", "k": 10 }"#,
        );
        let r = verify(&c).unwrap();
        let failed: Vec<_> = r.failures().iter().map(|c| c.name).collect();
        assert_eq!(failed, ["blended_stable_root"]);
    }
}
