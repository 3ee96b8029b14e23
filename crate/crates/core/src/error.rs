use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("graph is disconnected")]
    DisconnectedGraph,

    #[error("invalid edge ({i}, {j}): {reason}")]
    InvalidEdge { i: usize, j: usize, reason: String },

    #[error("graph must have at least one agent")]
    EmptyGraph,

    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("pair is not observable")]
    NotObservable,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("output coupling weight is not positive definite")]
    WeightNotPd,

    #[error("initial funnel margin violated on {location}: |nu| = {nu:e}, psi = {psi:e}")]
    FunnelViolationAtStart { location: String, nu: f64, psi: f64 },

    #[error("funnel left at t = {t}: ratio {ratio}")]
    FunnelBreach { t: f64, ratio: f64 },

    #[error("step size {h:e} fell below the floor at t = {t}")]
    StepUnderflow { t: f64, h: f64 },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("non-finite Jacobian entry at sample {0}")]
    NonFiniteJacobian(usize),

    #[error("implicit field root not bracketed at t = {t}, s = {s}")]
    NoBracket { t: f64, s: f64 },

    #[error("inverse coupling map of agent {0} is not monotone")]
    NotMonotone(usize),

    #[error("stacked regression matrix is rank deficient (rank {rank} < {cols})")]
    RankDeficientA { rank: usize, cols: usize },

    #[error("cost of agent {0} is not strictly convex")]
    NotConvex(usize),

    #[error("dispatch problem is infeasible: {0}")]
    Infeasible(String),

    #[error("stacked pair (G, S) is not detectable")]
    NotDetectable,

    #[error("agents share a nontrivial common undetectable subspace (dimension {0})")]
    NontrivialCommonUndetectable(usize),

    #[error("no agent carries the anchor role (id 1)")]
    MissingAnchor,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Integrator and solver failures, as opposed to malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FunnelBreach { .. }
                | Error::StepUnderflow { .. }
                | Error::NonFiniteState { .. }
                | Error::NonFiniteJacobian(_)
                | Error::NoBracket { .. }
                | Error::Numerical(_)
        )
    }
}
