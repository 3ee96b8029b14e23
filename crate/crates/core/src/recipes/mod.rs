//! Distributed-computation recipes built on the coupled networks, each with
//! an independent centralized oracle.

mod dispatch;
mod lienard;
mod observer;
mod scalar;

pub use dispatch::{dispatch_fields, dispatch_scenario, theta, Cost, DispatchAgent, DispatchProblem, DispatchSolution};
pub use lienard::{
    detect_limit_cycle, lienard_agents, lienard_scenario, pacemaker_config, pacemaker_nominal, projected_field,
    LienardAgent, LienardConfig, LienardScenario, LimitCycle, Polynomial, PACEMAKER_NOMINAL,
};
pub use observer::{
    observer_full_scenario, observer_rank_deficient_scenario, NoiseFn, ObserverFull, ObserverProblem,
    ObserverRankDeficient,
};
pub use scalar::{
    affine_fields, counting_fields, counting_scenario, decode_count, decode_roster, least_squares_fields,
    least_squares_scenario, median_fields, median_scenario, roster_fields, roster_scenario, sgn, LeastSquaresProblem,
    MedianSet, Scenario,
};

/// Recipe names accepted in scenario configs.
pub const RECIPE_NAMES: [&str; 8] = [
    "counting",
    "roster",
    "least_squares",
    "median",
    "dispatch",
    "lienard",
    "observer_full",
    "observer_rank_deficient",
];
