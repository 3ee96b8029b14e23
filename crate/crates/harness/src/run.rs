//! Scenario execution with join/leave events.

use std::collections::BTreeMap;
use std::ops::Range;

use blendnet_core::graph::Graph;
use blendnet_core::netsim::{
    assemble_edge_funnel, assemble_node_funnel, assemble_output_coupled, assemble_rank_deficient,
    assemble_state_coupled, integrate, pairwise_disagreement, FunnelFamily, FunnelGain, FunnelMonitor, FunnelSpec,
    NetworkSystem, PsiEnvelope, SolverMeta, Trajectory,
};
use blendnet_core::recipes::{observer_full_scenario, observer_rank_deficient_scenario, ObserverProblem};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CouplingConfig, EventAction, InitialConfig, RecipeConfig, ScenarioConfig};
use crate::error::{CoreContext, HarnessError, Result};
use crate::model::{build_graph, check_population, decode, matrix, AgentModel, Oracle, OracleSummary};

/// One funnel reading `(t, location, ν, ψ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunnelSample {
    pub t: f64,
    pub location: String,
    pub nu: f64,
    pub psi: f64,
}

/// Integration between two events.
#[derive(Debug, Clone)]
pub struct Segment {
    /// Persistent agent ids in slice order.
    pub ids: Vec<u32>,
    /// Components written out per agent.
    pub slices: Vec<Range<usize>>,
    /// Observed plant, reported as agent 0.
    pub plant: Option<Range<usize>>,
    pub traj: Trajectory,
    pub funnel: Vec<FunnelSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentFinal {
    pub id: u32,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedEvent {
    pub t: f64,
    pub action: &'static str,
    pub agent: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub recipe: &'static str,
    pub coupling: &'static str,
    pub k: Option<f64>,
    pub t_end: f64,
    pub n_agents: usize,
    pub agents: Vec<AgentFinal>,
    /// Largest pairwise disagreement at `t_end`.
    pub sync_error: f64,
    pub oracle: Option<OracleSummary>,
    pub decoded: Option<serde_json::Value>,
    pub max_funnel_ratio: Option<f64>,
    pub events: Vec<AppliedEvent>,
    pub warnings: Vec<String>,
    pub extras: BTreeMap<String, serde_json::Value>,
    pub solver: Vec<SolverMeta>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub segments: Vec<Segment>,
    pub summary: Summary,
}

/// Initial states of the first `n` agents.
pub fn initial_states(cfg: &InitialConfig, n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    match cfg {
        InitialConfig::Constant { value } => Ok(vec![vec![*value; dim]; n]),
        InitialConfig::Explicit { values } => {
            if values.len() != n || values.iter().any(|v| v.len() != dim) {
                return Err(HarnessError::Config(format!(
                    "explicit initial condition needs {n} vectors of length {dim}"
                )));
            }
            Ok(values.clone())
        }
        InitialConfig::RandomBox { low, high, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(*low..=*high)).collect())
                .collect())
        }
    }
}

/// Initial state of a joining agent. Explicit lists only cover the initial
/// population, so joiners start at zero.
pub fn joiner_state(cfg: &InitialConfig, id: u32, dim: usize) -> Vec<f64> {
    match cfg {
        InitialConfig::Constant { value } => vec![*value; dim],
        InitialConfig::Explicit { .. } => vec![0.0; dim],
        InitialConfig::RandomBox { low, high, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(u64::from(id));
            (0..dim).map(|_| rng.random_range(*low..=*high)).collect()
        }
    }
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

/// The live network between events.
struct Population {
    models: Vec<AgentModel>,
    ids: Vec<u32>,
    graph: Graph,
    x: Vec<f64>,
    dim: usize,
    next_id: u32,
    edge_env: BTreeMap<(u32, u32), PsiEnvelope>,
    node_env: BTreeMap<u32, PsiEnvelope>,
}

impl Population {
    fn initial(cfg: &ScenarioConfig) -> Result<Self> {
        let graph = build_graph(&cfg.graph)?;
        let models = AgentModel::population(&cfg.recipe)?;
        check_population(&models)?;
        let n = models.len();
        let dim = models[0].dim();
        let x: Vec<f64> = initial_states(&cfg.initial, n, dim)?.concat();
        let mut pop = Population {
            models,
            ids: (1..=n as u32).collect(),
            graph,
            x,
            dim,
            next_id: n as u32 + 1,
            edge_env: BTreeMap::new(),
            node_env: BTreeMap::new(),
        };
        if let Some((_, psi)) = funnel_family(&cfg.coupling) {
            for &(i, j, _) in pop.graph.edges() {
                pop.edge_env.insert(edge_key(pop.ids[i], pop.ids[j]), psi);
            }
            for &id in &pop.ids {
                pop.node_env.insert(id, psi);
            }
        }
        Ok(pop)
    }

    fn index_of(&self, id: u32) -> Result<usize> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .ok_or_else(|| HarnessError::Config(format!("agent {id} is not in the network")))
    }

    fn states(&self) -> Vec<&[f64]> {
        (0..self.ids.len())
            .map(|i| &self.x[i * self.dim..(i + 1) * self.dim])
            .collect()
    }

    fn funnel_spec(&self, family: FunnelFamily, gamma: FunnelGain) -> FunnelSpec {
        let psi = match family {
            FunnelFamily::EdgeWise => self
                .graph
                .edges()
                .iter()
                .map(|&(i, j, _)| self.edge_env[&edge_key(self.ids[i], self.ids[j])])
                .collect(),
            FunnelFamily::NodeWise => self.ids.iter().map(|id| self.node_env[id]).collect(),
        };
        FunnelSpec { family, gamma, psi }
    }

    fn system(&self, coupling: &CouplingConfig) -> Result<NetworkSystem> {
        let fields = || -> Result<Vec<_>> { self.models.iter().map(AgentModel::field).collect() };
        let ctx = || "assembling network".to_string();
        match coupling {
            CouplingConfig::State { k } => assemble_state_coupled(&fields()?, &self.graph, *k).context(ctx),
            CouplingConfig::Output { k, weight } => {
                let agents: Vec<_> = self
                    .models
                    .iter()
                    .map(AgentModel::output_agent)
                    .collect::<Result<_>>()?;
                let y_dim = agents.first().map_or(1, |a| a.y_dim);
                let w = match weight {
                    Some(w) => matrix(w, "output weight")?,
                    None => DMatrix::identity(y_dim, y_dim),
                };
                assemble_output_coupled(&agents, &w, &self.graph, *k).context(ctx)
            }
            CouplingConfig::RankDeficient { k, b } => {
                let b = b
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("rank-deficient coupling needs matrices".into()))?;
                let b_list: Vec<_> = b.iter().map(|m| matrix(m, "B_i")).collect::<Result<_>>()?;
                assemble_rank_deficient(&fields()?, &self.graph, *k, &b_list).context(ctx)
            }
            CouplingConfig::EdgeFunnel { gamma, .. } => {
                let spec = self.funnel_spec(FunnelFamily::EdgeWise, *gamma);
                assemble_edge_funnel(&fields()?, &self.graph, &spec).context(ctx)
            }
            CouplingConfig::NodeFunnel { gamma, .. } => {
                let spec = self.funnel_spec(FunnelFamily::NodeWise, *gamma);
                assemble_node_funnel(&fields()?, &self.graph, &spec).context(ctx)
            }
        }
    }

    fn funnel_labels(&self, family: FunnelFamily) -> Vec<String> {
        match family {
            FunnelFamily::EdgeWise => self
                .graph
                .edges()
                .iter()
                .map(|&(i, j, _)| {
                    let (a, b) = edge_key(self.ids[i], self.ids[j]);
                    format!("{a}-{b}")
                })
                .collect(),
            FunnelFamily::NodeWise => self.ids.iter().map(u32::to_string).collect(),
        }
    }

    /// Restarts node envelopes that an event pushed onto or past the
    /// boundary, plus those listed in `force`.
    fn refresh_node_envelopes(&mut self, t: f64, base: PsiEnvelope, force: &[u32], warnings: &mut Vec<String>) {
        let monitor = FunnelMonitor {
            spec: self.funnel_spec(FunnelFamily::NodeWise, FunnelGain::Inverse),
            graph: self.graph.clone(),
        };
        for (idx, (nu, psi)) in monitor.values(t, &self.x).into_iter().enumerate() {
            let id = self.ids[idx];
            let forced = force.contains(&id);
            if forced || nu.abs() >= psi {
                if !forced {
                    warnings.push(format!(
                        "t = {t}: funnel of agent {id} restarted after a topology change"
                    ));
                }
                self.node_env.insert(id, restarted(base, nu, t));
            }
        }
    }
}

/// `base` restarted at `t` wide enough that `|ν| < ψ(t)` holds strictly.
fn restarted(base: PsiEnvelope, nu: f64, t: f64) -> PsiEnvelope {
    PsiEnvelope {
        psi_bar: base.psi_bar.max(2.0 * nu.abs()),
        t0: t,
        ..base
    }
}

fn funnel_family(c: &CouplingConfig) -> Option<(FunnelFamily, PsiEnvelope)> {
    match *c {
        CouplingConfig::EdgeFunnel { psi, .. } => Some((FunnelFamily::EdgeWise, psi)),
        CouplingConfig::NodeFunnel { psi, .. } => Some((FunnelFamily::NodeWise, psi)),
        _ => None,
    }
}

fn funnel_samples(sys: &NetworkSystem, traj: &Trajectory, labels: &[String]) -> Vec<FunnelSample> {
    let Some(monitor) = &sys.funnel else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(traj.times.len() * labels.len());
    for (t, x) in traj.times.iter().zip(&traj.states) {
        for ((nu, psi), label) in monitor.values(*t, x).into_iter().zip(labels) {
            out.push(FunnelSample {
                t: *t,
                location: label.clone(),
                nu,
                psi,
            });
        }
    }
    out
}

/// The network at `t0` and its initial state (non-observer recipes).
pub fn initial_system(cfg: &ScenarioConfig) -> Result<(NetworkSystem, Vec<f64>)> {
    let pop = Population::initial(cfg)?;
    Ok((pop.system(&cfg.coupling)?, pop.x))
}

/// Runs a validated scenario in memory.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.recipe.is_observer() {
        return run_observer(cfg);
    }
    let mut pop = Population::initial(cfg)?;
    let dim = pop.dim;
    let funnel = funnel_family(&cfg.coupling);

    let opts = cfg.solver.options();
    let mut warnings = Vec::new();
    let mut applied = Vec::new();
    let mut segments = Vec::new();
    let mut t = cfg.solver.t0;
    let mut max_ratio: Option<f64> = None;
    let stops = cfg
        .events
        .iter()
        .map(|e| (e.t, Some(e)))
        .chain(std::iter::once((cfg.solver.t_end, None)));
    for (t_stop, event) in stops {
        if t_stop > t {
            let sys = pop.system(&cfg.coupling)?;
            let traj = integrate(&sys, &pop.x, t, t_stop, &opts).context(|| format!("integrating [{t}, {t_stop}]"))?;
            pop.x = traj.final_state().to_vec();
            if let Some(r) = traj.meta.max_funnel_ratio {
                max_ratio = Some(max_ratio.map_or(r, |m: f64| m.max(r)));
            }
            let funnel_rows = match funnel {
                Some((family, _)) => funnel_samples(&sys, &traj, &pop.funnel_labels(family)),
                None => Vec::new(),
            };
            segments.push(Segment {
                ids: pop.ids.clone(),
                slices: sys.agent_slices.clone(),
                plant: None,
                traj,
                funnel: funnel_rows,
            });
            t = t_stop;
        }
        let Some(event) = event else { break };
        match &event.action {
            EventAction::Leave { agent } => {
                let idx = pop.index_of(*agent)?;
                if pop.models[idx].is_anchor() {
                    warnings.push(format!(
                        "t = {t}: anchor agent {agent} left; the blended dynamics lose their only \
                         decaying term and are no longer contractive"
                    ));
                }
                pop.graph = pop
                    .graph
                    .without_agent(idx)
                    .context(|| format!("agent {agent} leaving at t = {t}"))?;
                pop.models.remove(idx);
                pop.ids.remove(idx);
                pop.x.drain(idx * dim..(idx + 1) * dim);
                pop.edge_env.retain(|&(a, b), _| a != *agent && b != *agent);
                pop.node_env.remove(agent);
                applied.push(AppliedEvent {
                    t,
                    action: "leave",
                    agent: *agent,
                });
                if let Some((FunnelFamily::NodeWise, psi)) = funnel {
                    pop.refresh_node_envelopes(t, psi, &[], &mut warnings);
                }
            }
            EventAction::Join { agent, links, initial } => {
                let model = AgentModel::joiner(&cfg.recipe, agent)?;
                if model.dim() != dim {
                    return Err(HarnessError::Config(format!(
                        "joining agent has dimension {}, network uses {dim}",
                        model.dim()
                    )));
                }
                let id = pop.next_id;
                pop.next_id += 1;
                let state = match initial {
                    Some(v) if v.len() == dim => v.clone(),
                    Some(v) => {
                        return Err(HarnessError::Config(format!(
                            "joining agent initial state has {} entries, expected {dim}",
                            v.len()
                        )))
                    }
                    None => joiner_state(&cfg.initial, id, dim),
                };
                let mut link_idx = Vec::with_capacity(links.len());
                for l in links {
                    link_idx.push((pop.index_of(l.id())?, l.weight()));
                }
                pop.graph = pop
                    .graph
                    .with_agent(&link_idx)
                    .context(|| format!("agent {id} joining at t = {t}"))?;
                pop.models.push(model);
                pop.ids.push(id);
                pop.x.extend_from_slice(&state);
                check_population(&pop.models)?;
                match funnel {
                    Some((FunnelFamily::EdgeWise, psi)) => {
                        for &(j, _) in &link_idx {
                            let nu = pop.x[j] - state[0];
                            pop.edge_env.insert(edge_key(id, pop.ids[j]), restarted(psi, nu, t));
                        }
                    }
                    Some((FunnelFamily::NodeWise, psi)) => pop.refresh_node_envelopes(t, psi, &[id], &mut warnings),
                    None => {}
                }
                applied.push(AppliedEvent {
                    t,
                    action: "join",
                    agent: id,
                });
            }
        }
    }

    let sys = pop.system(&cfg.coupling)?;
    let states = pop.states();
    let oracle = Oracle::of(&pop.models)?;
    if oracle.is_none() && matches!(pop.models[0], AgentModel::Counting { .. } | AgentModel::Roster { .. }) {
        warnings.push("the final population has no well-defined oracle".into());
    }
    let summary = Summary {
        name: cfg.name(),
        recipe: cfg.recipe.label(),
        coupling: cfg.coupling.label(),
        k: cfg.coupling.gain(),
        t_end: cfg.solver.t_end,
        n_agents: pop.ids.len(),
        agents: pop
            .ids
            .iter()
            .zip(&states)
            .map(|(&id, s)| AgentFinal { id, state: s.to_vec() })
            .collect(),
        sync_error: pairwise_disagreement(&pop.x, &sys.sync_slices),
        oracle: oracle.map(|o| o.summarize(&states)),
        decoded: decode(&pop.models, &states),
        max_funnel_ratio: max_ratio,
        events: applied,
        warnings,
        extras: BTreeMap::new(),
        solver: segments.iter().map(|s| s.traj.meta.clone()).collect(),
    };
    Ok(RunOutput { segments, summary })
}

fn observer_problem(s: &[Vec<f64>], g: &[Vec<Vec<f64>>], k: f64) -> Result<ObserverProblem> {
    let s = matrix(s, "S")?;
    let g = g.iter().map(|b| matrix(b, "G_i")).collect::<Result<Vec<_>>>()?;
    Ok(ObserverProblem::new(s, g, k))
}

fn run_observer(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let graph = build_graph(&cfg.graph)?;
    let k = cfg.coupling.gain().expect("observer couplings carry a gain");
    let opts = cfg.solver.options();
    let (t0, t_end) = (cfg.solver.t0, cfg.solver.t_end);
    let mut extras = BTreeMap::new();
    type Errors = Box<dyn Fn(&[f64]) -> Vec<f64>>;
    let (estimator, x0, errors, n_plant): (NetworkSystem, Vec<f64>, Errors, usize) = match &cfg.recipe {
        RecipeConfig::ObserverFull { s, g, chi0, kappa } => {
            let mut p = observer_problem(s, g, k)?;
            p.kappa = *kappa;
            let n = p.n();
            check_plant(chi0, n)?;
            let sc = observer_full_scenario(&p, &graph).context(|| "building full observer".into())?;
            extras.insert("kappa".into(), serde_json::json!(sc.kappa));
            let hats = initial_states(&cfg.initial, graph.n_agents(), n)?;
            let x0 = sc.estimator_state(chi0, &hats);
            let est = sc.estimator.clone();
            (est, x0, Box::new(move |x: &[f64]| sc.estimation_errors(x)), n)
        }
        RecipeConfig::ObserverRankDeficient { s, g, chi0 } => {
            let p = observer_problem(s, g, k)?;
            let n = p.n();
            check_plant(chi0, n)?;
            let sc =
                observer_rank_deficient_scenario(&p, &graph).context(|| "building rank-deficient observer".into())?;
            extras.insert("p_s".into(), serde_json::json!(sc.decomposition.p_s));
            let hats = initial_states(&cfg.initial, graph.n_agents(), n)?;
            let x0 = sc.estimator_state(chi0, &hats);
            let est = sc.estimator.clone();
            (est, x0, Box::new(move |x: &[f64]| sc.estimation_errors(x)), n)
        }
        _ => unreachable!("run_observer is only called for observer recipes"),
    };
    let traj = integrate(&estimator, &x0, t0, t_end, &opts).context(|| format!("integrating [{t0}, {t_end}]"))?;
    let xf = traj.final_state().to_vec();
    let ids: Vec<u32> = (1..=graph.n_agents() as u32).collect();
    let err = errors(&xf);
    let summary = Summary {
        name: cfg.name(),
        recipe: cfg.recipe.label(),
        coupling: cfg.coupling.label(),
        k: Some(k),
        t_end,
        n_agents: ids.len(),
        agents: ids
            .iter()
            .zip(&estimator.sync_slices)
            .map(|(&id, r)| AgentFinal {
                id,
                state: xf[r.clone()].to_vec(),
            })
            .collect(),
        sync_error: pairwise_disagreement(&xf, &estimator.sync_slices),
        oracle: Some(OracleSummary {
            target: serde_json::json!(&xf[..n_plant]),
            error: err.iter().copied().fold(0.0, f64::max),
        }),
        decoded: None,
        max_funnel_ratio: None,
        events: Vec::new(),
        warnings: Vec::new(),
        extras,
        solver: vec![traj.meta.clone()],
    };
    let segment = Segment {
        ids,
        slices: estimator.sync_slices.clone(),
        plant: Some(0..n_plant),
        traj,
        funnel: Vec::new(),
    };
    Ok(RunOutput {
        segments: vec![segment],
        summary,
    })
}

fn check_plant(chi0: &[f64], n: usize) -> Result<()> {
    if chi0.len() != n {
        return Err(HarnessError::Config(format!(
            "plant initial state has {} entries, S is {n}x{n}",
            chi0.len()
        )));
    }
    Ok(())
}
