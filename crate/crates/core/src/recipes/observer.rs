use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::blended::{
    blended_output, blended_rank_deficient, build_decomposition, contraction_estimate, BlendedModel, DecompositionData,
};
use crate::error::{Error, Result};
use crate::graph::{spectral, Graph};
use crate::linalg::{
    block_diag, complex_eigenvalues, is_detectable, lyapunov, observability_split, rank, ObserverSplit,
    DEFAULT_RANK_TOL,
};
use crate::netsim::{
    assemble_output_coupled, assemble_rank_deficient, CouplingKind, NetworkSystem, OutputAgent, VectorField,
};

/// Measurement noise `n_i(t)` written into a `q_i`-vector.
pub type NoiseFn = Arc<dyn Fn(usize, f64, &mut [f64]) + Send + Sync>;

/// Plant `χ̇ = Sχ` observed through `o_i = G_i χ + n_i`.
#[derive(Clone)]
pub struct ObserverProblem {
    pub s: DMatrix<f64>,
    pub g_blocks: Vec<DMatrix<f64>>,
    /// Least-squares injection gain; chosen automatically when absent.
    pub kappa: Option<f64>,
    pub k: f64,
    pub noise: Option<NoiseFn>,
}

impl fmt::Debug for ObserverProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObserverProblem")
            .field("s", &self.s)
            .field("g_blocks", &self.g_blocks)
            .field("kappa", &self.kappa)
            .field("k", &self.k)
            .field("noisy", &self.noise.is_some())
            .finish()
    }
}

impl ObserverProblem {
    pub fn new(s: DMatrix<f64>, g_blocks: Vec<DMatrix<f64>>, k: f64) -> Self {
        ObserverProblem {
            s,
            g_blocks,
            kappa: None,
            k,
            noise: None,
        }
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn stacked_g(&self) -> DMatrix<f64> {
        let rows: usize = self.g_blocks.iter().map(|g| g.nrows()).sum();
        let mut g = DMatrix::zeros(rows, self.n());
        let mut r = 0;
        for gi in &self.g_blocks {
            g.rows_mut(r, gi.nrows()).copy_from(gi);
            r += gi.nrows();
        }
        g
    }

    fn validate(&self, graph: &Graph) -> Result<Vec<ObserverSplit>> {
        let n = self.n();
        if !self.s.is_square() || n == 0 {
            return Err(Error::DimensionMismatch(
                "plant matrix must be square and nonempty".into(),
            ));
        }
        if self.g_blocks.len() != graph.n_agents() {
            return Err(Error::DimensionMismatch(format!(
                "{} output blocks for {} agents",
                self.g_blocks.len(),
                graph.n_agents()
            )));
        }
        if self.g_blocks.iter().any(|g| g.ncols() != n) {
            return Err(Error::DimensionMismatch("output blocks must have n columns".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "coupling gain must be positive, got {}",
                self.k
            )));
        }
        if !is_detectable(&self.s, &self.stacked_g()) {
            return Err(Error::NotDetectable);
        }
        self.g_blocks
            .iter()
            .map(|g| observability_split(&self.s, g, DEFAULT_RANK_TOL))
            .collect()
    }

    fn noise_into(&self, i: usize, t: f64, out: &mut [f64]) {
        match &self.noise {
            Some(n) => n(i, t, out),
            None => out.fill(0.0),
        }
    }
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    complex_eigenvalues(m)
        .map(|e| e.iter().map(|l| l.norm()).fold(0.0, f64::max))
        .unwrap_or_else(|| m.norm())
}

/// Stacked `A = col(Z_1ᵀ, …, Z_Nᵀ)`.
fn stacked_a(splits: &[ObserverSplit], n: usize) -> DMatrix<f64> {
    let rows: usize = splits.iter().map(|s| s.z_basis.ncols()).sum();
    let mut a = DMatrix::zeros(rows, n);
    let mut r = 0;
    for s in splits {
        let m = s.z_basis.ncols();
        a.rows_mut(r, m).copy_from(&s.z_basis.transpose());
        r += m;
    }
    a
}

/// Partial observers plus the least-squares consensus estimator.
#[derive(Debug, Clone)]
pub struct ObserverFull {
    /// Error network over `(z_i, y_i)`.
    pub error_system: NetworkSystem,
    /// Plant and estimators: `[χ | b_1, χ̂_1 | … | b_N, χ̂_N]`.
    pub estimator: NetworkSystem,
    pub splits: Vec<ObserverSplit>,
    pub kappa: f64,
    pub a: DMatrix<f64>,
    pub blended: BlendedModel,
    pub error_agents: Vec<OutputAgent>,
    n: usize,
}

impl ObserverFull {
    /// Estimator state with partial observers started at zero.
    pub fn estimator_state(&self, chi0: &[f64], chi_hat0: &[Vec<f64>]) -> Vec<f64> {
        let mut x = chi0.to_vec();
        for (split, hat) in self.splits.iter().zip(chi_hat0) {
            x.extend(std::iter::repeat_n(0.0, split.z_basis.ncols()));
            x.extend_from_slice(hat);
        }
        x
    }

    /// `‖χ̂_i − χ‖` per agent.
    pub fn estimation_errors(&self, x: &[f64]) -> Vec<f64> {
        let chi = &x[..self.n];
        self.estimator.sync_slices[..]
            .iter()
            .map(|r| {
                x[r.clone()]
                    .iter()
                    .zip(chi)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Smallest `κ = 2^j ≥ 1` for which the blended error model contracts in
/// the metric `diag(c P_1, …, c P_N, I)`, `P_i` solving the Lyapunov
/// equation of `S̄_i − Ū_iḠ_i`.
fn choose_kappa(p: &ObserverProblem, splits: &[ObserverSplit]) -> Result<f64> {
    let mut p_blocks = Vec::with_capacity(splits.len());
    for s in splits {
        let m = s.z_basis.ncols();
        p_blocks.push(lyapunov(&s.closed_loop(), &DMatrix::identity(m, m))?);
    }
    let n = p.n();
    let m_total: usize = splits.iter().map(|s| s.z_basis.ncols()).sum();
    let samples: Vec<(f64, Vec<f64>)> = (0..3)
        .map(|j| {
            let v = 10.0 * (j as f64 - 1.0) / ((m_total + n) as f64).sqrt();
            (0.0, vec![v; m_total + n])
        })
        .collect();
    for kexp in 0..24 {
        let kappa = 2f64.powi(kexp);
        let agents = full_error_agents(p, splits, kappa);
        let model = blended_output(&agents)?;
        for cexp in 0..40 {
            let c = 2f64.powi(cexp);
            let mut blocks: Vec<DMatrix<f64>> = p_blocks.iter().map(|b| b * c).collect();
            blocks.push(DMatrix::identity(n, n));
            let theta = block_diag(&blocks);
            if contraction_estimate(&model.reduced_field, &samples, Some(&theta))? < 0.0 {
                return Ok(kappa);
            }
        }
    }
    Err(Error::Numerical(
        "no injection gain makes the blended estimator contractive".into(),
    ))
}

pub fn observer_full_scenario(p: &ObserverProblem, graph: &Graph) -> Result<ObserverFull> {
    let splits = p.validate(graph)?;
    let n = p.n();
    let a = stacked_a(&splits, n);
    let r = rank(&a, DEFAULT_RANK_TOL);
    if r < n {
        return Err(Error::RankDeficientA { rank: r, cols: n });
    }
    let kappa = match p.kappa {
        Some(k) if k > 0.0 => k,
        Some(k) => return Err(Error::InvalidArgument(format!("κ must be positive, got {k}"))),
        None => choose_kappa(p, &splits)?,
    };
    let agents = full_error_agents(p, &splits, kappa);
    let mut error_system = assemble_output_coupled(&agents, &DMatrix::identity(n, n), graph, p.k)?;
    let local = kappa + spectral_radius(&p.s);
    error_system.stiffness_scale += local;
    let blended = blended_output(&agents)?;
    let estimator = full_estimator(p, &splits, graph, kappa, error_system.stiffness_scale)?;
    Ok(ObserverFull {
        error_system,
        estimator,
        splits,
        kappa,
        a,
        blended,
        error_agents: agents,
        n,
    })
}

/// `ż_i = (S̄_i − Ū_iḠ_i)z_i + Ū_i n_i`, `ẏ_i = S y_i − κ Z_i(Z_iᵀ y_i − z_i)`.
fn full_error_agents(p: &ObserverProblem, splits: &[ObserverSplit], kappa: f64) -> Vec<OutputAgent> {
    let n = p.n();
    splits
        .iter()
        .enumerate()
        .map(|(i, split)| {
            let h = split.closed_loop();
            let u = split.u_bar.clone();
            let z = split.z_basis.clone();
            let s = p.s.clone();
            let q = p.g_blocks[i].nrows();
            let problem = p.clone();
            let zt = z.transpose();
            OutputAgent::new(
                z.ncols(),
                n,
                move |t, zi, _, out| {
                    let mut noise = vec![0.0; q];
                    problem.noise_into(i, t, &mut noise);
                    let dz = &h * DVector::from_column_slice(zi) + &u * DVector::from_vec(noise);
                    out.copy_from_slice(dz.as_slice());
                },
                move |_, y, zi, out| {
                    let yv = DVector::from_column_slice(y);
                    let resid = &zt * &yv - DVector::from_column_slice(zi);
                    let dy = &s * &yv - &z * resid * kappa;
                    out.copy_from_slice(dy.as_slice());
                },
            )
        })
        .collect()
}

fn full_estimator(
    p: &ObserverProblem,
    splits: &[ObserverSplit],
    graph: &Graph,
    kappa: f64,
    stiffness: f64,
) -> Result<NetworkSystem> {
    let n = p.n();
    let mut agent_slices = Vec::new();
    let mut hat_slices = Vec::new();
    let mut offset = n;
    for s in splits {
        let m = s.z_basis.ncols();
        agent_slices.push(offset..offset + m + n);
        hat_slices.push(offset + m..offset + m + n);
        offset += m + n;
    }
    let total = offset;
    let s_mat = p.s.clone();
    let splits_owned = splits.to_vec();
    let g_blocks = p.g_blocks.clone();
    let problem = p.clone();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..graph.n_agents()).map(|i| graph.neighbors(i).to_vec()).collect();
    let k = p.k;
    let hats = hat_slices.clone();
    let agents = agent_slices.clone();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        let chi = DVector::from_column_slice(&x[..n]);
        out[..n].copy_from_slice((&s_mat * &chi).as_slice());
        for (i, split) in splits_owned.iter().enumerate() {
            let m = split.z_basis.ncols();
            let b_off = agents[i].start;
            let b = DVector::from_column_slice(&x[b_off..b_off + m]);
            let mut noise = vec![0.0; g_blocks[i].nrows()];
            problem.noise_into(i, t, &mut noise);
            let o = &g_blocks[i] * &chi + DVector::from_vec(noise);
            let db = &split.s_bar * &b - &split.u_bar * (&split.g_bar * &b - o);
            out[b_off..b_off + m].copy_from_slice(db.as_slice());
            let hat = DVector::from_column_slice(&x[hats[i].clone()]);
            let mut d = &s_mat * &hat - &split.z_basis * (split.z_basis.transpose() * &hat - &b) * kappa;
            for &(j, w) in &neighbors[i] {
                for c in 0..n {
                    d[c] += k * w * (x[hats[j].start + c] - hat[c]);
                }
            }
            out[hats[i].clone()].copy_from_slice(d.as_slice());
        }
    };
    let max_local = splits
        .iter()
        .map(|s| spectral_radius(&s.closed_loop()))
        .fold(0.0, f64::max);
    Ok(NetworkSystem::custom(
        total,
        CouplingKind::Output,
        Some(k),
        agent_slices,
        hat_slices,
        stiffness.max(max_local),
        rhs,
    ))
}

/// Observer with coupling `k W_iW_iᵀ` restricted to each agent's
/// unobservable subspace.
#[derive(Debug, Clone)]
pub struct ObserverRankDeficient {
    /// Error network `ẋ_i = (S − U_iG_i)x_i + U_i n_i + k B_i Σ α_ij (x_j − x_i)`.
    pub error_system: NetworkSystem,
    /// Plant and estimators: `[χ | χ̂_1 | … | χ̂_N]`.
    pub estimator: NetworkSystem,
    pub splits: Vec<ObserverSplit>,
    pub decomposition: DecompositionData,
    pub error_fields: Vec<VectorField>,
    pub blended: BlendedModel,
    n: usize,
}

impl ObserverRankDeficient {
    pub fn estimator_state(&self, chi0: &[f64], chi_hat0: &[Vec<f64>]) -> Vec<f64> {
        let mut x = chi0.to_vec();
        for hat in chi_hat0 {
            x.extend_from_slice(hat);
        }
        x
    }

    pub fn estimation_errors(&self, x: &[f64]) -> Vec<f64> {
        let chi = &x[..self.n];
        self.estimator
            .sync_slices
            .iter()
            .map(|r| {
                x[r.clone()]
                    .iter()
                    .zip(chi)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

pub fn observer_rank_deficient_scenario(p: &ObserverProblem, graph: &Graph) -> Result<ObserverRankDeficient> {
    let splits = p.validate(graph)?;
    let n = p.n();
    let b_list: Vec<DMatrix<f64>> = splits.iter().map(|s| &s.w_basis * s.w_basis.transpose()).collect();
    let decomposition = build_decomposition(graph, &b_list)?;
    if decomposition.p_s > 0 {
        return Err(Error::NontrivialCommonUndetectable(decomposition.p_s));
    }
    let injections: Vec<DMatrix<f64>> = splits.iter().map(|s| &s.z_basis * &s.u_bar).collect();
    let closed: Vec<DMatrix<f64>> = injections.iter().zip(&p.g_blocks).map(|(u, g)| &p.s - u * g).collect();
    let error_fields: Vec<VectorField> = closed
        .iter()
        .zip(&injections)
        .enumerate()
        .map(|(i, (a, u))| {
            let (a, u) = (a.clone(), u.clone());
            let q = p.g_blocks[i].nrows();
            let problem = p.clone();
            VectorField::new(n, "observer-error", move |t, x, out| {
                let mut noise = vec![0.0; q];
                problem.noise_into(i, t, &mut noise);
                let dx = &a * DVector::from_column_slice(x) + &u * DVector::from_vec(noise);
                out.copy_from_slice(dx.as_slice());
            })
        })
        .collect();
    let local = closed.iter().map(spectral_radius).fold(0.0, f64::max);
    let mut error_system = assemble_rank_deficient(&error_fields, graph, p.k, &b_list)?;
    error_system.stiffness_scale += local;
    let blended = blended_rank_deficient(&error_fields, &decomposition)?;

    let lambda_max = spectral(graph)?.lambda_max();
    let total = n * (graph.n_agents() + 1);
    let hat_slices: Vec<_> = (0..graph.n_agents()).map(|i| n * (i + 1)..n * (i + 2)).collect();
    let s_mat = p.s.clone();
    let g_blocks = p.g_blocks.clone();
    let problem = p.clone();
    let neighbors: Vec<Vec<(usize, f64)>> = (0..graph.n_agents()).map(|i| graph.neighbors(i).to_vec()).collect();
    let k = p.k;
    let hats = hat_slices.clone();
    let b_owned = b_list.clone();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        let chi = DVector::from_column_slice(&x[..n]);
        out[..n].copy_from_slice((&s_mat * &chi).as_slice());
        for (i, r) in hats.iter().enumerate() {
            let hat = DVector::from_column_slice(&x[r.clone()]);
            let mut noise = vec![0.0; g_blocks[i].nrows()];
            problem.noise_into(i, t, &mut noise);
            let o = &g_blocks[i] * &chi + DVector::from_vec(noise);
            let mut diff = DVector::zeros(n);
            for &(j, w) in &neighbors[i] {
                for c in 0..n {
                    diff[c] += w * (x[hats[j].start + c] - hat[c]);
                }
            }
            let d = &s_mat * &hat + &injections[i] * (o - &g_blocks[i] * &hat) + &b_owned[i] * diff * k;
            out[r.clone()].copy_from_slice(d.as_slice());
        }
    };
    let has_coupling = b_list.iter().any(|b| b.amax() > 0.0);
    let stiffness = if has_coupling { k * lambda_max } else { 0.0 } + local;
    let estimator = NetworkSystem::custom(
        total,
        CouplingKind::RankDeficient,
        Some(k),
        hat_slices.clone(),
        hat_slices,
        stiffness,
        rhs,
    );
    Ok(ObserverRankDeficient {
        error_system,
        estimator,
        splits,
        decomposition,
        error_fields,
        blended,
        n,
    })
}
