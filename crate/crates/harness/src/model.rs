//! Per-agent models and the recipe oracles evaluated on a live population.

use blendnet_core::graph::Graph;
use blendnet_core::netsim::{OutputAgent, VectorField};
use blendnet_core::recipes::{
    decode_count, decode_roster, least_squares_fields, lienard_agents, median_fields, pacemaker_config, DispatchAgent,
    DispatchProblem, LeastSquaresProblem, LienardAgent, LienardConfig, MedianSet,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DispatchAgentConfig, EdgeConfig, GraphConfig, LeastSquaresAgent, RecipeConfig};
use crate::error::{CoreContext, HarnessError, Result};

#[derive(Debug, Clone)]
pub enum AgentModel {
    Counting { anchor: bool },
    Roster { id: u32 },
    LeastSquares { a: DMatrix<f64>, b: DVector<f64> },
    Median { r: f64, smoothing: Option<f64> },
    Dispatch(DispatchAgent),
    Affine { a: f64, c: f64 },
    Lienard { a: f64, agent: LienardAgent },
}

pub fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(HarnessError::Config(format!(
            "{what} must be a nonempty rectangular matrix"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn dispatch_agent(c: &DispatchAgentConfig) -> DispatchAgent {
    DispatchAgent::quadratic(c.a, c.b, c.demand, c.lower, c.upper)
}

fn least_squares_agent(c: &LeastSquaresAgent) -> Result<AgentModel> {
    let a = matrix(&c.a, "A_i")?;
    if a.nrows() != c.b.len() {
        return Err(HarnessError::Config(format!(
            "A_i has {} rows but b_i has {} entries",
            a.nrows(),
            c.b.len()
        )));
    }
    Ok(AgentModel::LeastSquares {
        a,
        b: DVector::from_vec(c.b.clone()),
    })
}

impl AgentModel {
    /// Initial population for a non-observer recipe.
    pub fn population(recipe: &RecipeConfig) -> Result<Vec<AgentModel>> {
        Ok(match recipe {
            RecipeConfig::Counting { n } => (0..*n).map(|i| AgentModel::Counting { anchor: i == 0 }).collect(),
            RecipeConfig::Roster { ids } => ids.iter().map(|&id| AgentModel::Roster { id }).collect(),
            RecipeConfig::LeastSquares { agents, random } => match (random, agents.is_empty()) {
                (Some(r), true) => random_least_squares(r.agents, r.rows, r.cols, r.seed),
                (None, false) => agents.iter().map(least_squares_agent).collect::<Result<_>>()?,
                _ => {
                    return Err(HarnessError::Config(
                        "least_squares needs exactly one of 'agents' or 'random'".into(),
                    ))
                }
            },
            RecipeConfig::Median { r, smoothing } => r
                .iter()
                .map(|&r| AgentModel::Median {
                    r,
                    smoothing: *smoothing,
                })
                .collect(),
            RecipeConfig::Dispatch { agents } => {
                agents.iter().map(|c| AgentModel::Dispatch(dispatch_agent(c))).collect()
            }
            RecipeConfig::Affine { a, c } => {
                if a.len() != c.len() {
                    return Err(HarnessError::Config("affine 'a' and 'c' differ in length".into()));
                }
                a.iter().zip(c).map(|(&a, &c)| AgentModel::Affine { a, c }).collect()
            }
            RecipeConfig::Lienard { a, agents } => agents
                .iter()
                .map(|agent| AgentModel::Lienard {
                    a: *a,
                    agent: agent.clone(),
                })
                .collect(),
            RecipeConfig::Pacemaker { n, seed, scale } => {
                let cfg = pacemaker_config(*n, &mut ChaCha8Rng::seed_from_u64(*seed), *scale);
                cfg.agents
                    .into_iter()
                    .map(|agent| AgentModel::Lienard { a: cfg.a, agent })
                    .collect()
            }
            RecipeConfig::ObserverFull { .. } | RecipeConfig::ObserverRankDeficient { .. } => {
                return Err(HarnessError::Config("observer recipes have no per-agent models".into()))
            }
        })
    }

    /// Parses the `agent` object of a join event for this recipe.
    pub fn joiner(recipe: &RecipeConfig, spec: &serde_json::Value) -> Result<AgentModel> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct CountingJoin {
            #[serde(default)]
            anchor: bool,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RosterJoin {
            id: u32,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct MedianJoin {
            r: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct AffineJoin {
            a: f64,
            c: f64,
        }
        fn parse<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
            let v = if v.is_null() { serde_json::json!({}) } else { v.clone() };
            serde_json::from_value(v).map_err(|e| HarnessError::Config(format!("join agent: {e}")))
        }
        Ok(match recipe {
            RecipeConfig::Counting { .. } => AgentModel::Counting {
                anchor: parse::<CountingJoin>(spec)?.anchor,
            },
            RecipeConfig::Roster { .. } => AgentModel::Roster {
                id: parse::<RosterJoin>(spec)?.id,
            },
            RecipeConfig::LeastSquares { .. } => least_squares_agent(&parse(spec)?)?,
            RecipeConfig::Median { smoothing, .. } => AgentModel::Median {
                r: parse::<MedianJoin>(spec)?.r,
                smoothing: *smoothing,
            },
            RecipeConfig::Dispatch { .. } => AgentModel::Dispatch(dispatch_agent(&parse(spec)?)),
            RecipeConfig::Affine { .. } => {
                let j: AffineJoin = parse(spec)?;
                AgentModel::Affine { a: j.a, c: j.c }
            }
            RecipeConfig::Lienard { a, .. } => AgentModel::Lienard {
                a: *a,
                agent: parse(spec)?,
            },
            RecipeConfig::Pacemaker { .. } => AgentModel::Lienard {
                a: 1.0,
                agent: parse(spec)?,
            },
            RecipeConfig::ObserverFull { .. } | RecipeConfig::ObserverRankDeficient { .. } => {
                return Err(HarnessError::Config(
                    "observer recipes do not accept joining agents".into(),
                ))
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            AgentModel::LeastSquares { a, .. } => a.ncols(),
            AgentModel::Lienard { .. } => 2,
            _ => 1,
        }
    }

    pub fn is_anchor(&self) -> bool {
        matches!(
            self,
            AgentModel::Counting { anchor: true } | AgentModel::Roster { id: 1 }
        )
    }

    pub fn field(&self) -> Result<VectorField> {
        Ok(match self {
            AgentModel::Counting { anchor: true } => VectorField::scalar("counting-anchor", |_, x| -x + 1.0),
            AgentModel::Counting { anchor: false } => VectorField::scalar("counting", |_, _| 1.0),
            AgentModel::Roster { id } => {
                if *id == 0 || *id > 52 {
                    return Err(HarnessError::Config(format!("roster id {id} outside 1..=52")));
                }
                let c = 2f64.powi(*id as i32 - 1);
                if *id == 1 {
                    VectorField::scalar("roster-anchor", move |_, x| -x + c)
                } else {
                    VectorField::scalar(format!("roster-{id}"), move |_, _| c)
                }
            }
            AgentModel::LeastSquares { a, b } => {
                let p = LeastSquaresProblem::new(vec![a.clone()], vec![b.clone()])
                    .context(|| "least-squares agent".into())?;
                least_squares_fields(&p).remove(0)
            }
            AgentModel::Median { r, smoothing } => median_fields(&[*r], *smoothing).remove(0),
            AgentModel::Dispatch(agent) => {
                let agent = agent.clone();
                VectorField::scalar("dispatch", move |_, x| agent.demand - agent.theta(x))
            }
            &AgentModel::Affine { a, c } => VectorField::scalar("affine", move |_, x| -a * x + c),
            AgentModel::Lienard { .. } => {
                return Err(HarnessError::Config("Liénard agents are output coupled".into()));
            }
        })
    }

    pub fn output_agent(&self) -> Result<OutputAgent> {
        match self {
            AgentModel::Lienard { a, agent } => Ok(lienard_agents(&LienardConfig {
                a: *a,
                agents: vec![agent.clone()],
            })
            .context(|| "Liénard agent".into())?
            .remove(0)),
            _ => Err(HarnessError::Config("only Liénard agents are output coupled".into())),
        }
    }
}

fn random_least_squares(agents: usize, rows: usize, cols: usize, seed: u64) -> Vec<AgentModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..agents)
        .map(|_| {
            let a = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0));
            let b = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..=1.0));
            AgentModel::LeastSquares { a, b }
        })
        .collect()
}

pub fn build_graph(cfg: &GraphConfig) -> Result<Graph> {
    let g = match cfg {
        GraphConfig::Complete { n } => Graph::complete(*n),
        GraphConfig::Ring { n } => Graph::ring(*n),
        GraphConfig::Path { n } => Graph::path(*n),
        GraphConfig::Random { n, p, seed } => Graph::random_connected(*n, *p, *seed),
        GraphConfig::Edges { n, edges } => {
            let mut list = Vec::with_capacity(edges.len());
            for e in edges {
                let (i, j, w) = match *e {
                    EdgeConfig::Unit(i, j) => (i, j, 1.0),
                    EdgeConfig::Weighted(i, j, w) => (i, j, w),
                };
                if i == 0 || j == 0 {
                    return Err(HarnessError::Config("graph edges are 1-based".into()));
                }
                list.push((i - 1, j - 1, w));
            }
            Graph::new(*n, &list)
        }
    };
    g.context(|| "building graph".into())
}

/// What the network should compute, given the current population.
#[derive(Debug, Clone)]
pub enum Oracle {
    /// Every agent should reach this point.
    Point(Vec<f64>),
    /// Every agent should reach this interval.
    Interval(MedianSet),
    /// Agent `i` should reach a state with `θ_i(x_i) = λ*_i`.
    Dispatch {
        agents: Vec<DispatchAgent>,
        lambda: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub target: serde_json::Value,
    /// Largest per-agent distance to the target.
    pub error: f64,
}

impl Oracle {
    /// `Ok(None)` when the population has nothing to compute (e.g. the
    /// counting anchor left).
    pub fn of(models: &[AgentModel]) -> Result<Option<Oracle>> {
        let Some(first) = models.first() else {
            return Ok(None);
        };
        let n = models.len() as f64;
        Ok(match first {
            AgentModel::Counting { .. } => {
                let anchors = models.iter().filter(|m| m.is_anchor()).count();
                (anchors > 0).then(|| Oracle::Point(vec![n / anchors as f64]))
            }
            AgentModel::Roster { .. } => {
                let anchored = models.iter().any(AgentModel::is_anchor);
                let total: f64 = models
                    .iter()
                    .map(|m| match m {
                        AgentModel::Roster { id } => 2f64.powi(*id as i32 - 1),
                        _ => 0.0,
                    })
                    .sum();
                anchored.then(|| Oracle::Point(vec![total]))
            }
            AgentModel::LeastSquares { .. } => {
                let (a, b): (Vec<_>, Vec<_>) = models
                    .iter()
                    .filter_map(|m| match m {
                        AgentModel::LeastSquares { a, b } => Some((a.clone(), b.clone())),
                        _ => None,
                    })
                    .unzip();
                let p = LeastSquaresProblem::new(a, b).context(|| "least-squares oracle".into())?;
                Some(Oracle::Point(
                    p.oracle()
                        .context(|| "least-squares oracle".into())?
                        .as_slice()
                        .to_vec(),
                ))
            }
            AgentModel::Median { .. } => {
                let r: Vec<f64> = models
                    .iter()
                    .filter_map(|m| match m {
                        AgentModel::Median { r, .. } => Some(*r),
                        _ => None,
                    })
                    .collect();
                Some(Oracle::Interval(MedianSet::of(&r).context(|| "median oracle".into())?))
            }
            AgentModel::Dispatch(_) => {
                let agents: Vec<DispatchAgent> = models
                    .iter()
                    .filter_map(|m| match m {
                        AgentModel::Dispatch(a) => Some(a.clone()),
                        _ => None,
                    })
                    .collect();
                let sol = DispatchProblem::new(agents.clone())
                    .context(|| "dispatch oracle".into())?
                    .oracle();
                Some(Oracle::Dispatch {
                    agents,
                    lambda: sol.lambda,
                })
            }
            AgentModel::Affine { .. } => {
                let (sa, sc) = models.iter().fold((0.0, 0.0), |(sa, sc), m| match m {
                    AgentModel::Affine { a, c } => (sa + a, sc + c),
                    _ => (sa, sc),
                });
                (sa > 0.0).then(|| Oracle::Point(vec![sc / sa]))
            }
            AgentModel::Lienard { .. } => None,
        })
    }

    /// Largest per-agent error over `states`.
    pub fn error(&self, states: &[&[f64]]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, x) in states.iter().enumerate() {
            let e = match self {
                Oracle::Point(p) => x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                Oracle::Interval(set) => set.distance(x[0]),
                Oracle::Dispatch { agents, lambda } => (agents[i].theta(x[0]) - lambda[i]).abs(),
            };
            worst = worst.max(e);
        }
        worst
    }

    pub fn summarize(&self, states: &[&[f64]]) -> OracleSummary {
        let target = match self {
            Oracle::Point(p) => serde_json::json!(p),
            Oracle::Interval(set) => serde_json::json!([set.lo, set.hi]),
            Oracle::Dispatch { lambda, .. } => serde_json::json!({ "lambda": lambda }),
        };
        OracleSummary {
            target,
            error: self.error(states),
        }
    }
}

/// Decoded answers for the integer-valued recipes.
pub fn decode(models: &[AgentModel], states: &[&[f64]]) -> Option<serde_json::Value> {
    match models.first()? {
        AgentModel::Counting { .. } => Some(serde_json::json!(states
            .iter()
            .map(|x| decode_count(x[0]))
            .collect::<Vec<_>>())),
        AgentModel::Roster { .. } => Some(serde_json::json!(states
            .iter()
            .map(|x| decode_roster(x[0]))
            .collect::<Vec<_>>())),
        _ => None,
    }
}

/// Checks that hold before integration, e.g. roster ids are distinct.
pub fn check_population(models: &[AgentModel]) -> Result<()> {
    let mut ids = std::collections::BTreeSet::new();
    for m in models {
        if let AgentModel::Roster { id } = m {
            if !ids.insert(*id) {
                return Err(HarnessError::Config(format!("duplicate roster id {id}")));
            }
        }
        m.field().map(|_| ()).or_else(|e| match m {
            AgentModel::Lienard { .. } => Ok(()),
            _ => Err(e),
        })?;
    }
    if let Some(d) = models.first().map(AgentModel::dim) {
        if models.iter().any(|m| m.dim() != d) {
            return Err(HarnessError::Config("agents disagree on state dimension".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_population_has_one_anchor() {
        let models = AgentModel::population(&RecipeConfig::Counting { n: 4 }).unwrap();
        assert_eq!(models.iter().filter(|m| m.is_anchor()).count(), 1);
        match Oracle::of(&models).unwrap().unwrap() {
            Oracle::Point(p) => assert_eq!(p, vec![4.0]),
            other => panic!("{other:?}"),
        }
        assert!(Oracle::of(&models[1..]).unwrap().is_none());
    }

    #[test]
    fn roster_oracle_sums_bits() {
        let models = AgentModel::population(&RecipeConfig::Roster { ids: vec![1, 3, 4] }).unwrap();
        match Oracle::of(&models).unwrap().unwrap() {
            Oracle::Point(p) => assert_eq!(p, vec![13.0]),
            other => panic!("{other:?}"),
        }
        let dup = AgentModel::population(&RecipeConfig::Roster { ids: vec![1, 3, 3] }).unwrap();
        assert!(check_population(&dup).is_err());
    }

    #[test]
    fn random_least_squares_is_seeded() {
        let a = random_least_squares(3, 2, 2, 9);
        let b = random_least_squares(3, 2, 2, 9);
        match (&a[2], &b[2]) {
            (AgentModel::LeastSquares { a: x, .. }, AgentModel::LeastSquares { a: y, .. }) => assert_eq!(x, y),
            _ => unreachable!(),
        }
    }

    #[test]
    fn joiner_specs_parse_per_recipe() {
        let counting = RecipeConfig::Counting { n: 3 };
        assert!(!AgentModel::joiner(&counting, &serde_json::Value::Null)
            .unwrap()
            .is_anchor());
        let median = RecipeConfig::Median {
            r: vec![1.0],
            smoothing: None,
        };
        assert!(matches!(
            AgentModel::joiner(&median, &serde_json::json!({"r": 4.0})).unwrap(),
            AgentModel::Median { r, .. } if r == 4.0
        ));
        assert!(AgentModel::joiner(&median, &serde_json::json!({"q": 4.0})).is_err());
    }

    #[test]
    fn dispatch_oracle_error_uses_theta() {
        let models: Vec<_> = (0..2)
            .map(|_| AgentModel::Dispatch(DispatchAgent::quadratic(0.5, 0.0, 1.0, 0.0, 5.0)))
            .collect();
        let o = Oracle::of(&models).unwrap().unwrap();
        // θ(s) = s on the interior, λ* = 1.
        assert!(o.error(&[&[1.0], &[1.0]]) < 1e-9);
        assert!((o.error(&[&[1.5], &[1.0]]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn edge_list_is_one_based() {
        let cfg = GraphConfig::Edges {
            n: 3,
            edges: vec![EdgeConfig::Unit(1, 2), EdgeConfig::Weighted(2, 3, 0.5)],
        };
        let g = build_graph(&cfg).unwrap();
        assert_eq!(g.weight(1, 2), 0.5);
        let bad = GraphConfig::Edges {
            n: 3,
            edges: vec![EdgeConfig::Unit(0, 2)],
        };
        assert!(build_graph(&bad).is_err());
    }
}
