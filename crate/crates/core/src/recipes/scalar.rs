use nalgebra::{DMatrix, DVector};

use crate::blended::{blended_state, BlendedModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{rank, DEFAULT_RANK_TOL};
use crate::netsim::{assemble_state_coupled, NetworkSystem, VectorField};

/// A state-coupled recipe: the network plus the agent fields it was built from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: NetworkSystem,
    pub fields: Vec<VectorField>,
}

impl Scenario {
    pub fn build(fields: Vec<VectorField>, g: &Graph, k: f64) -> Result<Self> {
        Ok(Scenario {
            system: assemble_state_coupled(&fields, g, k)?,
            fields,
        })
    }

    pub fn blended(&self) -> Result<BlendedModel> {
        blended_state(&self.fields)
    }
}

/// Agent 0 is the anchor `ẋ = −x + 1`; every other agent has `ẋ = 1`.
pub fn counting_fields(n: usize) -> Vec<VectorField> {
    (0..n)
        .map(|i| {
            if i == 0 {
                VectorField::scalar("counting-anchor", |_, x| -x + 1.0)
            } else {
                VectorField::scalar("counting", |_, _| 1.0)
            }
        })
        .collect()
}

pub fn counting_scenario(g: &Graph, k: f64) -> Result<Scenario> {
    Scenario::build(counting_fields(g.n_agents()), g, k)
}

pub fn decode_count(x: f64) -> i64 {
    x.round() as i64
}

/// Agent with id `i` contributes `2^{i−1}`; id 1 is the anchor.
pub fn roster_fields(ids: &[u32]) -> Result<Vec<VectorField>> {
    let mut seen = std::collections::BTreeSet::new();
    for &id in ids {
        if id == 0 || id > 52 {
            return Err(Error::InvalidArgument(format!("roster id {id} outside 1..=52")));
        }
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate roster id {id}")));
        }
    }
    if !seen.contains(&1) {
        return Err(Error::MissingAnchor);
    }
    Ok(ids
        .iter()
        .map(|&id| {
            let c = 2f64.powi(id as i32 - 1);
            if id == 1 {
                VectorField::scalar("roster-anchor", move |_, x| -x + c)
            } else {
                VectorField::scalar(format!("roster-{id}"), move |_, _| c)
            }
        })
        .collect())
}

pub fn roster_scenario(g: &Graph, ids: &[u32], k: f64) -> Result<Scenario> {
    if ids.len() != g.n_agents() {
        return Err(Error::DimensionMismatch(format!(
            "{} roster ids for {} agents",
            ids.len(),
            g.n_agents()
        )));
    }
    Scenario::build(roster_fields(ids)?, g, k)
}

/// Ids whose bits are set in `round(x)`, ascending.
pub fn decode_roster(x: f64) -> Vec<u32> {
    let v = x.round();
    if !(v >= 1.0) {
        return Vec::new();
    }
    let bits = v as u64;
    (0..64).filter(|b| bits >> b & 1 == 1).map(|b| b + 1).collect()
}

/// Row blocks `A_i`, `b_i` of an overdetermined system `A x ≈ b`.
#[derive(Debug, Clone)]
pub struct LeastSquaresProblem {
    pub a_blocks: Vec<DMatrix<f64>>,
    pub b_blocks: Vec<DVector<f64>>,
}

impl LeastSquaresProblem {
    pub fn new(a_blocks: Vec<DMatrix<f64>>, b_blocks: Vec<DVector<f64>>) -> Result<Self> {
        let n = a_blocks.first().map(|a| a.ncols()).ok_or(Error::EmptyGraph)?;
        if a_blocks.len() != b_blocks.len()
            || a_blocks
                .iter()
                .zip(&b_blocks)
                .any(|(a, b)| a.ncols() != n || a.nrows() != b.len())
        {
            return Err(Error::DimensionMismatch("A_i and b_i blocks do not line up".into()));
        }
        Ok(LeastSquaresProblem { a_blocks, b_blocks })
    }

    pub fn dim(&self) -> usize {
        self.a_blocks[0].ncols()
    }

    pub fn stacked(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows: usize = self.a_blocks.iter().map(|a| a.nrows()).sum();
        let mut a = DMatrix::zeros(rows, self.dim());
        let mut b = DVector::zeros(rows);
        let mut r = 0;
        for (ai, bi) in self.a_blocks.iter().zip(&self.b_blocks) {
            a.rows_mut(r, ai.nrows()).copy_from(ai);
            b.rows_mut(r, bi.len()).copy_from(bi);
            r += ai.nrows();
        }
        (a, b)
    }

    /// Unique minimizer from the normal equations `AᵀA x = Aᵀb`.
    pub fn oracle(&self) -> Result<DVector<f64>> {
        let (a, b) = self.stacked();
        let r = rank(&a, DEFAULT_RANK_TOL);
        if r < a.ncols() {
            return Err(Error::RankDeficientA {
                rank: r,
                cols: a.ncols(),
            });
        }
        let ata = a.transpose() * &a;
        let chol = ata
            .cholesky()
            .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
        Ok(chol.solve(&(a.transpose() * b)))
    }
}

/// `ẋ = −A_iᵀ(A_i x − b_i)`.
pub fn least_squares_fields(p: &LeastSquaresProblem) -> Vec<VectorField> {
    let n = p.dim();
    p.a_blocks
        .iter()
        .zip(&p.b_blocks)
        .map(|(a, b)| {
            let ata = a.transpose() * a;
            let atb = a.transpose() * b;
            VectorField::new(n, "least-squares", move |_, x, out| {
                for r in 0..n {
                    let mut acc = atb[r];
                    for c in 0..n {
                        acc -= ata[(r, c)] * x[c];
                    }
                    out[r] = acc;
                }
            })
        })
        .collect()
}

pub fn least_squares_scenario(p: &LeastSquaresProblem, g: &Graph, k: f64) -> Result<Scenario> {
    p.oracle()?;
    if p.a_blocks.len() != g.n_agents() {
        return Err(Error::DimensionMismatch(format!(
            "{} blocks for {} agents",
            p.a_blocks.len(),
            g.n_agents()
        )));
    }
    Scenario::build(least_squares_fields(p), g, k)
}

/// `sgn(s)` with `sgn(0) = 0`; a positive `width` replaces it by the
/// saturation `sat(s/width, −1, 1)`.
pub fn sgn(s: f64, width: Option<f64>) -> f64 {
    match width {
        Some(w) if w > 0.0 => (s / w).clamp(-1.0, 1.0),
        _ => {
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// `ẋ = sgn(r_i − x)`.
pub fn median_fields(r: &[f64], smoothing: Option<f64>) -> Vec<VectorField> {
    r.iter()
        .map(|&ri| VectorField::scalar("median", move |_, x| sgn(ri - x, smoothing)))
        .collect()
}

pub fn median_scenario(r: &[f64], g: &Graph, k: f64, smoothing: Option<f64>) -> Result<(Scenario, MedianSet)> {
    let set = MedianSet::of(r)?;
    if r.len() != g.n_agents() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} agents",
            r.len(),
            g.n_agents()
        )));
    }
    Ok((Scenario::build(median_fields(r, smoothing), g, k)?, set))
}

/// The median set: a point for odd `N`, the middle interval for even `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianSet {
    pub lo: f64,
    pub hi: f64,
}

impl MedianSet {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("median values must be finite".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        Ok(if n % 2 == 1 {
            MedianSet {
                lo: sorted[n / 2],
                hi: sorted[n / 2],
            }
        } else {
            MedianSet {
                lo: sorted[n / 2 - 1],
                hi: sorted[n / 2],
            }
        })
    }

    pub fn distance(&self, x: f64) -> f64 {
        (self.lo - x).max(x - self.hi).max(0.0)
    }
}

/// `ẋ = −a_i x + c_i`.
pub fn affine_fields(a: &[f64], c: &[f64]) -> Result<Vec<VectorField>> {
    if a.len() != c.len() {
        return Err(Error::DimensionMismatch(
            "affine coefficient lists differ in length".into(),
        ));
    }
    Ok(a.iter()
        .zip(c)
        .map(|(&ai, &ci)| VectorField::scalar("affine", move |_, x| -ai * x + ci))
        .collect())
}
