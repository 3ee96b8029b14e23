use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::netsim::VectorField;

use super::scalar::Scenario;

pub type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A strictly convex generation cost, described by its derivative.
#[derive(Clone)]
pub enum Cost {
    /// `J(λ) = aλ² + bλ`.
    Quadratic { a: f64, b: f64 },
    /// Derivative `J'` and its inverse, both strictly increasing.
    Custom {
        derivative: ScalarMap,
        inverse_derivative: ScalarMap,
    },
}

impl fmt::Debug for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cost::Quadratic { a, b } => write!(f, "Quadratic {{ a: {a}, b: {b} }}"),
            Cost::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl Cost {
    pub fn derivative(&self, lambda: f64) -> f64 {
        match self {
            Cost::Quadratic { a, b } => 2.0 * a * lambda + b,
            Cost::Custom { derivative, .. } => derivative(lambda),
        }
    }

    fn inverse_derivative(&self, s: f64) -> f64 {
        match self {
            Cost::Quadratic { a, b } => (s - b) / (2.0 * a),
            Cost::Custom { inverse_derivative, .. } => inverse_derivative(s),
        }
    }

    fn check_convex(&self, agent: usize) -> Result<()> {
        match self {
            Cost::Quadratic { a, .. } if !(*a > 0.0) => Err(Error::NotConvex(agent)),
            _ => Ok(()),
        }
    }
}

/// `θ(s) = (J')⁻¹(sat(s, J'(λ̲), J'(λ̄)))`.
pub fn theta(s: f64, cost: &Cost, lower: f64, upper: f64) -> Result<f64> {
    cost.check_convex(0)?;
    Ok(theta_unchecked(s, cost, lower, upper))
}

fn theta_unchecked(s: f64, cost: &Cost, lower: f64, upper: f64) -> f64 {
    let lo = cost.derivative(lower);
    let hi = cost.derivative(upper);
    if s <= lo {
        lower
    } else if s >= hi {
        upper
    } else {
        cost.inverse_derivative(s).clamp(lower, upper)
    }
}

#[derive(Debug, Clone)]
pub struct DispatchAgent {
    pub cost: Cost,
    pub demand: f64,
    pub lower: f64,
    pub upper: f64,
}

impl DispatchAgent {
    pub fn quadratic(a: f64, b: f64, demand: f64, lower: f64, upper: f64) -> Self {
        DispatchAgent {
            cost: Cost::Quadratic { a, b },
            demand,
            lower,
            upper,
        }
    }

    pub fn theta(&self, s: f64) -> f64 {
        theta_unchecked(s, &self.cost, self.lower, self.upper)
    }
}

/// Minimize `Σ J_i(λ_i)` subject to `Σλ_i = Σd_i` and `λ̲_i ≤ λ_i ≤ λ̄_i`.
#[derive(Debug, Clone)]
pub struct DispatchProblem {
    pub agents: Vec<DispatchAgent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    /// Optimal dual variable.
    pub s_star: f64,
    pub lambda: Vec<f64>,
    /// `|Σλ_i − Σd_i|`.
    pub balance_residual: f64,
    /// Largest `|J'_i(λ_i) − s*|` over agents strictly inside their bounds.
    pub stationarity_residual: f64,
}

impl DispatchProblem {
    pub fn new(agents: Vec<DispatchAgent>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::EmptyGraph);
        }
        for (i, a) in agents.iter().enumerate() {
            a.cost.check_convex(i)?;
            if !(a.lower <= a.upper) {
                return Err(Error::InvalidArgument(format!(
                    "agent {} has bounds [{}, {}]",
                    i + 1,
                    a.lower,
                    a.upper
                )));
            }
        }
        let demand: f64 = agents.iter().map(|a| a.demand).sum();
        let lo: f64 = agents.iter().map(|a| a.lower).sum();
        let hi: f64 = agents.iter().map(|a| a.upper).sum();
        if !(lo <= demand && demand <= hi) {
            return Err(Error::Infeasible(format!("total demand {demand} outside [{lo}, {hi}]")));
        }
        Ok(DispatchProblem { agents })
    }

    pub fn total_demand(&self) -> f64 {
        self.agents.iter().map(|a| a.demand).sum()
    }

    /// `Σ(d_i − θ_i(s))`, nonincreasing in `s`.
    pub fn imbalance(&self, s: f64) -> f64 {
        self.agents.iter().map(|a| a.demand - a.theta(s)).sum()
    }

    /// Dual bisection on `Σ(d_i − θ_i(s)) = 0`.
    pub fn oracle(&self) -> DispatchSolution {
        let mut lo = self
            .agents
            .iter()
            .map(|a| a.cost.derivative(a.lower))
            .fold(f64::INFINITY, f64::min)
            - 1.0;
        let mut hi = self
            .agents
            .iter()
            .map(|a| a.cost.derivative(a.upper))
            .fold(f64::NEG_INFINITY, f64::max)
            + 1.0;
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.imbalance(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s_star = 0.5 * (lo + hi);
        let lambda: Vec<f64> = self.agents.iter().map(|a| a.theta(s_star)).collect();
        let balance_residual = (lambda.iter().sum::<f64>() - self.total_demand()).abs();
        let stationarity_residual = self
            .agents
            .iter()
            .zip(&lambda)
            .filter(|(a, &l)| l > a.lower && l < a.upper)
            .map(|(a, &l)| (a.cost.derivative(l) - s_star).abs())
            .fold(0.0, f64::max);
        DispatchSolution {
            s_star,
            lambda,
            balance_residual,
            stationarity_residual,
        }
    }
}

/// `ẋ = d_i − θ_i(x)`.
pub fn dispatch_fields(p: &DispatchProblem) -> Vec<VectorField> {
    p.agents
        .iter()
        .map(|a| {
            let agent = a.clone();
            VectorField::scalar("dispatch", move |_, x| agent.demand - agent.theta(x))
        })
        .collect()
}

pub fn dispatch_scenario(p: &DispatchProblem, g: &Graph, k: f64) -> Result<(Scenario, DispatchSolution)> {
    if p.agents.len() != g.n_agents() {
        return Err(Error::DimensionMismatch(format!(
            "{} dispatch agents for {} graph agents",
            p.agents.len(),
            g.n_agents()
        )));
    }
    Ok((Scenario::build(dispatch_fields(p), g, k)?, p.oracle()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blended::blended_state;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn theta_examples() {
        let half = Cost::Quadratic { a: 0.5, b: 0.0 };
        assert_eq!(theta(1.0, &half, 0.0, 2.0).unwrap(), 1.0);
        assert_eq!(theta(5.0, &half, 0.0, 2.0).unwrap(), 2.0);
        let c = Cost::Quadratic { a: 1.0, b: 1.0 };
        assert_relative_eq!(theta(0.0, &c, -1.0, 1.0).unwrap(), -0.5);
        assert!(matches!(
            theta(0.0, &Cost::Quadratic { a: 0.0, b: 1.0 }, 0.0, 1.0),
            Err(Error::NotConvex(_))
        ));
    }

    #[test]
    fn custom_cost_matches_quadratic() {
        let custom = Cost::Custom {
            derivative: Arc::new(|l| 4.0 * l + 1.0),
            inverse_derivative: Arc::new(|s| (s - 1.0) / 4.0),
        };
        let quad = Cost::Quadratic { a: 2.0, b: 1.0 };
        for s in [-10.0, -1.0, 0.3, 2.0, 9.0] {
            assert_eq!(
                theta(s, &custom, -1.0, 1.5).unwrap(),
                theta(s, &quad, -1.0, 1.5).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn theta_is_monotone_and_bounded(a in 0.1f64..5.0, b in -3.0f64..3.0, lo in -5.0f64..0.0, width in 0.0f64..5.0, s1 in -50.0f64..50.0, s2 in -50.0f64..50.0) {
            let c = Cost::Quadratic { a, b };
            let hi = lo + width;
            let (x1, x2) = (theta(s1, &c, lo, hi).unwrap(), theta(s2, &c, lo, hi).unwrap());
            prop_assert!(x1 >= lo && x1 <= hi);
            if s1 <= s2 {
                prop_assert!(x1 <= x2);
            }
        }
    }

    #[test]
    fn symmetric_agents_serve_their_own_demand() {
        let p = DispatchProblem::new(vec![DispatchAgent::quadratic(1.0, 0.5, 2.0, 0.0, 5.0); 4]).unwrap();
        let sol = p.oracle();
        for l in &sol.lambda {
            assert_relative_eq!(*l, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn three_agent_quadratic_oracle() {
        let agents = (1..=3)
            .map(|i| DispatchAgent::quadratic(i as f64 / 2.0, 0.0, 1.0, -100.0, 100.0))
            .collect();
        let p = DispatchProblem::new(agents).unwrap();
        let sol = p.oracle();
        assert!(sol.balance_residual < 1e-10);
        assert!(sol.stationarity_residual < 1e-10);
        // J_i' = iλ, so λ_i = s/i and s·(1 + 1/2 + 1/3) = 3.
        assert_relative_eq!(sol.s_star, 3.0 / (11.0 / 6.0), epsilon = 1e-10);
    }

    #[test]
    fn binding_bound_is_active() {
        let agents = vec![
            DispatchAgent::quadratic(0.1, 0.0, 1.0, 0.0, 1.2),
            DispatchAgent::quadratic(1.0, 0.0, 1.0, 0.0, 5.0),
            DispatchAgent::quadratic(1.0, 0.0, 1.0, 0.0, 5.0),
        ];
        let sol = DispatchProblem::new(agents).unwrap().oracle();
        assert_relative_eq!(sol.lambda[0], 1.2, epsilon = 1e-12);
        assert!(sol.balance_residual < 1e-9);
        assert!(sol.stationarity_residual < 1e-8);
        assert_relative_eq!(sol.lambda[1], 0.9, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_demand_is_rejected() {
        let err = DispatchProblem::new(vec![DispatchAgent::quadratic(1.0, 0.0, 10.0, 0.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn dispatch_blended_form() {
        let agents = vec![
            DispatchAgent::quadratic(0.1, 0.0, 1.0, 0.0, 1.2),
            DispatchAgent::quadratic(1.0, 0.3, 2.0, 0.0, 5.0),
        ];
        let p = DispatchProblem::new(agents).unwrap();
        let bl = blended_state(&dispatch_fields(&p)).unwrap();
        for i in 0..20 {
            let s = -3.0 + 0.4 * i as f64;
            let expected = p.imbalance(s) / 2.0;
            assert_relative_eq!(bl.reduced_field.eval_vec(0.0, &[s])[0], expected, epsilon = 1e-12);
        }
    }
}
