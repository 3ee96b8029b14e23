//! Scenario files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use blendnet_core::netsim::{
    FunnelGain, Method, PsiEnvelope, SolverOptions, MAX_STIFFNESS_FACTOR, STIFFNESS_STEP_FACTOR,
};
use blendnet_core::recipes::LienardAgent;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub recipe: RecipeConfig,
    pub graph: GraphConfig,
    pub coupling: CouplingConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub events: Vec<EventConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecipeConfig {
    /// Agent 1 carries `−x + 1`, the rest `1`.
    Counting {
        n: usize,
    },
    Roster {
        ids: Vec<u32>,
    },
    LeastSquares {
        #[serde(default)]
        agents: Vec<LeastSquaresAgent>,
        #[serde(default)]
        random: Option<RandomLeastSquares>,
    },
    Median {
        r: Vec<f64>,
        #[serde(default)]
        smoothing: Option<f64>,
    },
    Dispatch {
        agents: Vec<DispatchAgentConfig>,
    },
    /// `ẋ_i = −a_i x + c_i`.
    Affine {
        a: Vec<f64>,
        c: Vec<f64>,
    },
    Lienard {
        a: f64,
        agents: Vec<LienardAgent>,
    },
    /// Perturbed pacemaker cells with `Δ ~ scale·N(0, 1)`.
    Pacemaker {
        n: usize,
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
    },
    ObserverFull {
        s: Vec<Vec<f64>>,
        g: Vec<Vec<Vec<f64>>>,
        chi0: Vec<f64>,
        #[serde(default)]
        kappa: Option<f64>,
    },
    ObserverRankDeficient {
        s: Vec<Vec<f64>>,
        g: Vec<Vec<Vec<f64>>>,
        chi0: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeastSquaresAgent {
    /// Row-major block `A_i`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// Entries of `A` and `b` uniform on `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomLeastSquares {
    pub agents: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchAgentConfig {
    /// Cost `a λ² + b λ`.
    pub a: f64,
    pub b: f64,
    pub demand: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphConfig {
    Complete {
        n: usize,
    },
    Ring {
        n: usize,
    },
    Path {
        n: usize,
    },
    Random {
        n: usize,
        p: f64,
        seed: u64,
    },
    /// 1-based endpoints, optional weight.
    Edges {
        n: usize,
        edges: Vec<EdgeConfig>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeConfig {
    Unit(usize, usize),
    Weighted(usize, usize, f64),
}

impl GraphConfig {
    pub fn n(&self) -> usize {
        match *self {
            GraphConfig::Complete { n }
            | GraphConfig::Ring { n }
            | GraphConfig::Path { n }
            | GraphConfig::Random { n, .. }
            | GraphConfig::Edges { n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingConfig {
    State {
        k: f64,
    },
    Output {
        k: f64,
        /// Positive definite `Λ`; identity when absent.
        #[serde(default)]
        weight: Option<Vec<Vec<f64>>>,
    },
    RankDeficient {
        k: f64,
        /// One PSD `B_i` per agent; derived for the observer recipe.
        #[serde(default)]
        b: Option<Vec<Vec<Vec<f64>>>>,
    },
    EdgeFunnel {
        gamma: FunnelGain,
        psi: PsiEnvelope,
    },
    NodeFunnel {
        gamma: FunnelGain,
        psi: PsiEnvelope,
    },
}

impl CouplingConfig {
    pub fn gain(&self) -> Option<f64> {
        match *self {
            CouplingConfig::State { k }
            | CouplingConfig::Output { k, .. }
            | CouplingConfig::RankDeficient { k, .. } => Some(k),
            _ => None,
        }
    }

    /// Same coupling with gain `k`; `None` for funnel kinds.
    pub fn with_gain(&self, k: f64) -> Option<Self> {
        let mut c = self.clone();
        match &mut c {
            CouplingConfig::State { k: g }
            | CouplingConfig::Output { k: g, .. }
            | CouplingConfig::RankDeficient { k: g, .. } => *g = k,
            _ => return None,
        }
        Some(c)
    }

    pub fn label(&self) -> &'static str {
        match self {
            CouplingConfig::State { .. } => "state",
            CouplingConfig::Output { .. } => "output",
            CouplingConfig::RankDeficient { .. } => "rank_deficient",
            CouplingConfig::EdgeFunnel { .. } => "edge_funnel",
            CouplingConfig::NodeFunnel { .. } => "node_funnel",
        }
    }

    pub fn is_funnel(&self) -> bool {
        matches!(
            self,
            CouplingConfig::EdgeFunnel { .. } | CouplingConfig::NodeFunnel { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    /// Sample spacing of the stored trajectory; every step when null.
    #[serde(default = "default_output_dt")]
    pub output_dt: Option<f64>,
    /// Step cap relative to the network's fastest linear mode.
    #[serde(default = "default_stiffness_factor")]
    pub stiffness_factor: f64,
}

fn default_method() -> Method {
    Method::Rk4
}
fn default_h() -> f64 {
    1e-3
}
fn default_rtol() -> f64 {
    1e-8
}
fn default_atol() -> f64 {
    1e-10
}
fn default_output_dt() -> Option<f64> {
    Some(0.01)
}
fn default_stiffness_factor() -> f64 {
    STIFFNESS_STEP_FACTOR
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            method: self.method,
            h: self.h,
            rtol: self.rtol,
            atol: self.atol,
            output_dt: self.output_dt,
            stiffness_factor: self.stiffness_factor,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant {
        value: f64,
    },
    /// One state vector per initial agent.
    Explicit {
        values: Vec<Vec<f64>>,
    },
    /// Independent uniform draws on `[low, high]`.
    RandomBox {
        low: f64,
        high: f64,
        seed: u64,
    },
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub t: f64,
    #[serde(flatten)]
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EventAction {
    Join {
        /// Recipe-specific agent description.
        #[serde(default)]
        agent: serde_json::Value,
        /// Persistent ids of the new neighbors, optionally weighted.
        links: Vec<LinkConfig>,
        #[serde(default)]
        initial: Option<Vec<f64>>,
    },
    Leave {
        agent: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkConfig {
    Unit(u32),
    Weighted(u32, f64),
}

impl LinkConfig {
    pub fn id(&self) -> u32 {
        match *self {
            LinkConfig::Unit(id) | LinkConfig::Weighted(id, _) => id,
        }
    }

    pub fn weight(&self) -> f64 {
        match *self {
            LinkConfig::Unit(_) => 1.0,
            LinkConfig::Weighted(_, w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub trajectory: bool,
    #[serde(default)]
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            trajectory: true,
            plots: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl RecipeConfig {
    pub fn label(&self) -> &'static str {
        match self {
            RecipeConfig::Counting { .. } => "counting",
            RecipeConfig::Roster { .. } => "roster",
            RecipeConfig::LeastSquares { .. } => "least_squares",
            RecipeConfig::Median { .. } => "median",
            RecipeConfig::Dispatch { .. } => "dispatch",
            RecipeConfig::Affine { .. } => "affine",
            RecipeConfig::Lienard { .. } => "lienard",
            RecipeConfig::Pacemaker { .. } => "pacemaker",
            RecipeConfig::ObserverFull { .. } => "observer_full",
            RecipeConfig::ObserverRankDeficient { .. } => "observer_rank_deficient",
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            RecipeConfig::Counting { n } | RecipeConfig::Pacemaker { n, .. } => *n,
            RecipeConfig::Roster { ids } => ids.len(),
            RecipeConfig::LeastSquares { agents, random } => random.map_or(agents.len(), |r| r.agents),
            RecipeConfig::Median { r, .. } => r.len(),
            RecipeConfig::Dispatch { agents } => agents.len(),
            RecipeConfig::Affine { a, .. } => a.len(),
            RecipeConfig::Lienard { agents, .. } => agents.len(),
            RecipeConfig::ObserverFull { g, .. } | RecipeConfig::ObserverRankDeficient { g, .. } => g.len(),
        }
    }

    pub fn is_observer(&self) -> bool {
        matches!(
            self,
            RecipeConfig::ObserverFull { .. } | RecipeConfig::ObserverRankDeficient { .. }
        )
    }

    fn is_lienard(&self) -> bool {
        matches!(self, RecipeConfig::Lienard { .. } | RecipeConfig::Pacemaker { .. })
    }

    fn is_scalar(&self) -> bool {
        !self.is_lienard() && !self.is_observer() && !matches!(self, RecipeConfig::LeastSquares { .. })
    }

    fn accepts(&self, coupling: &CouplingConfig) -> bool {
        match self {
            RecipeConfig::Lienard { .. } | RecipeConfig::Pacemaker { .. } => {
                matches!(coupling, CouplingConfig::Output { .. })
            }
            RecipeConfig::ObserverFull { .. } => matches!(coupling, CouplingConfig::Output { weight: None, .. }),
            RecipeConfig::ObserverRankDeficient { .. } => {
                matches!(coupling, CouplingConfig::RankDeficient { b: None, .. })
            }
            RecipeConfig::LeastSquares { .. } => {
                matches!(
                    coupling,
                    CouplingConfig::State { .. } | CouplingConfig::RankDeficient { .. }
                )
            }
            _ => !matches!(coupling, CouplingConfig::Output { .. }),
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| HarnessError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.recipe.label().to_string())
    }

    /// Structural checks that need no numerics.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        let n = self.recipe.n_agents();
        if n == 0 {
            return Err(config_err("recipe has no agents"));
        }
        if self.graph.n() != n {
            return Err(config_err(format!(
                "graph has {} agents but the recipe defines {n}",
                self.graph.n()
            )));
        }
        if !self.recipe.accepts(&self.coupling) {
            return Err(config_err(format!(
                "recipe '{}' cannot use coupling '{}'",
                self.recipe.label(),
                self.coupling.label()
            )));
        }
        if self.coupling.is_funnel() && !self.recipe.is_scalar() {
            return Err(config_err("funnel couplings need scalar agents"));
        }
        if let Some(k) = self.coupling.gain() {
            if !(k > 0.0 && k.is_finite()) {
                return Err(config_err(format!("coupling gain must be positive, got {k}")));
            }
        }
        if let CouplingConfig::RankDeficient { b: Some(b), .. } = &self.coupling {
            if b.len() != n {
                return Err(config_err(format!("{} coupling matrices for {n} agents", b.len())));
            }
        }
        if let CouplingConfig::RankDeficient { b: None, .. } = &self.coupling {
            if !self.recipe.is_observer() {
                return Err(config_err("rank-deficient coupling needs one matrix B_i per agent"));
            }
        }
        let s = &self.solver;
        if !(s.t_end > s.t0) || !s.t_end.is_finite() {
            return Err(config_err(format!("t_end {} must exceed t0 {}", s.t_end, s.t0)));
        }
        if !(s.h > 0.0) || !(s.rtol > 0.0) || !(s.atol > 0.0) {
            return Err(config_err("solver step and tolerances must be positive"));
        }
        if !(s.stiffness_factor > 0.0 && s.stiffness_factor <= MAX_STIFFNESS_FACTOR) {
            return Err(config_err(format!(
                "stiffness_factor must lie in (0, {MAX_STIFFNESS_FACTOR}]"
            )));
        }
        if matches!(s.output_dt, Some(dt) if !(dt > 0.0)) {
            return Err(config_err("output_dt must be positive"));
        }
        match &self.initial {
            InitialConfig::Explicit { values } if values.len() != n => {
                return Err(config_err(format!("{} initial states for {n} agents", values.len())));
            }
            InitialConfig::RandomBox { low, high, .. } if !(low <= high) => {
                return Err(config_err("random box needs low <= high"));
            }
            _ => {}
        }
        self.validate_events(n)
    }

    fn validate_events(&self, n: usize) -> Result<()> {
        if self.events.is_empty() {
            return Ok(());
        }
        if self.recipe.is_observer() || matches!(self.coupling, CouplingConfig::RankDeficient { .. }) {
            return Err(config_err(format!(
                "join/leave events are not supported for recipe '{}' with coupling '{}'",
                self.recipe.label(),
                self.coupling.label()
            )));
        }
        let mut alive: BTreeSet<u32> = (1..=n as u32).collect();
        let mut next_id = n as u32 + 1;
        let mut last = f64::NEG_INFINITY;
        for (idx, ev) in self.events.iter().enumerate() {
            let at = format!("event {} (t = {})", idx + 1, ev.t);
            if !(ev.t >= self.solver.t0 && ev.t <= self.solver.t_end) {
                return Err(config_err(format!("{at} lies outside [t0, t_end]")));
            }
            if !(ev.t > last) {
                return Err(config_err(format!("{at}: event times must be strictly increasing")));
            }
            last = ev.t;
            match &ev.action {
                EventAction::Leave { agent } => {
                    if !alive.remove(agent) {
                        return Err(config_err(format!("{at}: agent {agent} is not in the network")));
                    }
                    if alive.is_empty() {
                        return Err(config_err(format!("{at}: the last agent cannot leave")));
                    }
                }
                EventAction::Join { links, .. } => {
                    if links.is_empty() {
                        return Err(config_err(format!("{at}: a joining agent needs at least one link")));
                    }
                    let mut seen = BTreeSet::new();
                    for l in links {
                        if !alive.contains(&l.id()) {
                            return Err(config_err(format!("{at}: link to unknown agent {}", l.id())));
                        }
                        if !seen.insert(l.id()) {
                            return Err(config_err(format!("{at}: duplicate link to agent {}", l.id())));
                        }
                        if !(l.weight() > 0.0) {
                            return Err(config_err(format!("{at}: link weights must be positive")));
                        }
                    }
                    alive.insert(next_id);
                    next_id += 1;
                }
            }
        }
        Ok(())
    }
}
