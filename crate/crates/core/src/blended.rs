//! Blended (quasi-steady-state) models of strongly coupled networks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{
    block_diag, kernel_basis, kron, lambda_max_sym, lambda_min_sym, orthonormal_complement, psd_split, rank,
    row_space_and_kernel, PsdSplit, DEFAULT_RANK_TOL,
};
use crate::netsim::{FunnelFamily, FunnelSpec, OutputAgent, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendedFamily {
    State,
    Output,
    RankDeficient,
}

pub type ReconstructFn = dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync;

/// Reduced field on the slow state together with the map back to the
/// per-agent prediction.
#[derive(Clone)]
pub struct BlendedModel {
    pub reduced_field: VectorField,
    reconstruct: Arc<ReconstructFn>,
    pub family: BlendedFamily,
}

impl BlendedModel {
    pub fn dim(&self) -> usize {
        self.reduced_field.dim()
    }

    /// Predicted state of every agent for a slow state.
    pub fn reconstruct(&self, slow: &[f64]) -> Vec<Vec<f64>> {
        (self.reconstruct)(slow)
    }
}

impl fmt::Debug for BlendedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlendedModel")
            .field("dim", &self.dim())
            .field("family", &self.family)
            .finish()
    }
}

/// `ṡ = (1/N) Σ f_i(t, s)`.
pub fn blended_state(fields: &[VectorField]) -> Result<BlendedModel> {
    let n = fields.first().map(VectorField::dim).ok_or(Error::EmptyGraph)?;
    if fields.iter().any(|f| f.dim() != n) {
        return Err(Error::DimensionMismatch("fields must share one dimension".into()));
    }
    let count = fields.len();
    let owned = fields.to_vec();
    let field = VectorField::new(n, "blended", move |t, s, out| {
        out.fill(0.0);
        let mut buf = vec![0.0; n];
        for f in &owned {
            f.eval(t, s, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b;
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    });
    Ok(BlendedModel {
        reduced_field: field,
        reconstruct: Arc::new(move |s| vec![s.to_vec(); count]),
        family: BlendedFamily::State,
    })
}

/// Slow state `(ẑ_1, …, ẑ_N, s)`:
/// `ẑ̇_i = g_i(t, ẑ_i, s)`, `ṡ = (1/N) Σ h_i(t, s, ẑ_i)`.
/// Reconstruction gives agent `i` the block `[ẑ_i, s]`.
pub fn blended_output(agents: &[OutputAgent]) -> Result<BlendedModel> {
    let n = agents.first().map(|a| a.y_dim).ok_or(Error::EmptyGraph)?;
    if agents.iter().any(|a| a.y_dim != n) {
        return Err(Error::DimensionMismatch(
            "output states must share one dimension".into(),
        ));
    }
    let mut offsets = Vec::with_capacity(agents.len());
    let mut total = 0;
    for a in agents {
        offsets.push(total);
        total += a.z_dim;
    }
    let s_off = total;
    let dim = total + n;
    let owned = agents.to_vec();
    let count = agents.len() as f64;
    let field = VectorField::new(dim, "blended-output", move |t, x, out| {
        let s = &x[s_off..];
        let mut acc = vec![0.0; n];
        let mut buf = vec![0.0; n];
        for (a, &o) in owned.iter().zip(&offsets) {
            let z = &x[o..o + a.z_dim];
            a.eval_g(t, z, s, &mut out[o..o + a.z_dim]);
            a.eval_h(t, s, z, &mut buf);
            for c in 0..n {
                acc[c] += buf[c];
            }
        }
        for c in 0..n {
            out[s_off + c] = acc[c] / count;
        }
    });
    let dims: Vec<(usize, usize)> = agents
        .iter()
        .map(|a| a.z_dim)
        .scan(0, |o, m| {
            let start = *o;
            *o += m;
            Some((start, m))
        })
        .collect();
    let reconstruct = move |x: &[f64]| {
        let s = &x[s_off..];
        dims.iter()
            .map(|&(o, m)| {
                let mut v = x[o..o + m].to_vec();
                v.extend_from_slice(s);
                v
            })
            .collect()
    };
    Ok(BlendedModel {
        reduced_field: field,
        reconstruct: Arc::new(reconstruct),
        family: BlendedFamily::Output,
    })
}

/// Coordinates for rank-deficient coupling `k B_i Σ α_ij (x_j − x_i)`.
#[derive(Debug, Clone)]
pub struct DecompositionData {
    pub splits: Vec<PsdSplit>,
    /// `p̄ × p_s`, orthonormal columns spanning `ker((ℒ⊗I)W_netΛ_net)`.
    pub v: DMatrix<f64>,
    /// `p̄ × (p̄ − p_s)` orthonormal complement of `v`.
    pub v_bar: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// `n × p_s`, the common value of `W_iΛ_iV_i`.
    pub m: DMatrix<f64>,
    /// `p̄ × (nN − p̄)`.
    pub l: DMatrix<f64>,
    pub p_s: usize,
    pub p_bar: usize,
    pub n: usize,
    /// `V̄ᵀΛ_netW_netᵀ(ℒ⊗I)`, the fast-subspace projection of the stacked field.
    pub fast_projection: DMatrix<f64>,
    w_net: DMatrix<f64>,
    lambda_net: DMatrix<f64>,
    laplacian_n: DMatrix<f64>,
}

/// Residuals of the decomposition invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub kernel_residual: f64,
    pub orthogonality_residual: f64,
    pub m_spread: f64,
    pub m_rank: usize,
    pub q_asymmetry: f64,
    pub q_min_eigenvalue: f64,
    pub p_s: usize,
    pub min_p: usize,
}

impl DecompositionReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.kernel_residual <= tol
            && self.orthogonality_residual <= tol
            && self.m_spread <= tol
            && self.m_rank == self.p_s
            && self.q_asymmetry <= tol
            && (self.q_min_eigenvalue.is_nan() || self.q_min_eigenvalue > 0.0)
            && self.p_s <= self.min_p
    }
}

const DECOMPOSITION_TOL: f64 = 1e-9;

impl DecompositionData {
    pub fn n_agents(&self) -> usize {
        self.splits.len()
    }

    /// Row offsets of agent blocks in `p̄`-space.
    fn p_offsets(&self) -> Vec<usize> {
        self.splits
            .iter()
            .scan(0, |o, s| {
                let start = *o;
                *o += s.rank;
                Some(start)
            })
            .collect()
    }

    /// `V_i`, the rows of `V` belonging to agent `i`.
    pub fn v_block(&self, i: usize) -> DMatrix<f64> {
        let o = self.p_offsets()[i];
        self.v.rows(o, self.splits[i].rank).into_owned()
    }

    /// `L_i`, the rows of `L` belonging to agent `i`.
    pub fn l_block(&self, i: usize) -> DMatrix<f64> {
        let o = self.p_offsets()[i];
        self.l.rows(o, self.splits[i].rank).into_owned()
    }

    /// `R_B = im(M)` basis.
    pub fn r_b(&self) -> DMatrix<f64> {
        row_space_and_kernel(&self.m.transpose(), DEFAULT_RANK_TOL).0
    }

    pub fn check(&self) -> DecompositionReport {
        let scale = self.laplacian_n.amax().max(1.0) * self.lambda_net.amax().max(1.0);
        let kernel_residual = if self.p_s == 0 {
            0.0
        } else {
            (&self.laplacian_n * &self.w_net * &self.lambda_net * &self.v).amax() / scale
        };
        let mut basis = DMatrix::zeros(self.p_bar, self.p_bar);
        basis.columns_mut(0, self.p_s).copy_from(&self.v);
        basis
            .columns_mut(self.p_s, self.p_bar - self.p_s)
            .copy_from(&self.v_bar);
        let orthogonality_residual = if self.p_bar == 0 {
            0.0
        } else {
            (basis.transpose() * &basis - DMatrix::identity(self.p_bar, self.p_bar)).amax()
        };
        let mut m_spread: f64 = 0.0;
        for (i, s) in self.splits.iter().enumerate() {
            let mi = &s.w * &s.lambda * self.v_block(i);
            m_spread = m_spread.max((mi - &self.m).amax());
        }
        let q_asymmetry = (&self.q - self.q.transpose()).amax();
        let q_min_eigenvalue = if self.q.nrows() == 0 {
            f64::NAN
        } else {
            lambda_min_sym(&self.q)
        };
        DecompositionReport {
            kernel_residual,
            orthogonality_residual,
            m_spread,
            m_rank: rank(&self.m, DEFAULT_RANK_TOL),
            q_asymmetry,
            q_min_eigenvalue,
            p_s: self.p_s,
            min_p: self.splits.iter().map(|s| s.rank).min().unwrap_or(0),
        }
    }

    /// `‖V̄ᵀΛ_netW_netᵀ(ℒ⊗I)col(f_i(t, x_i))‖` at one stacked state.
    pub fn fast_residual(&self, fields: &[VectorField], t: f64, x: &[f64]) -> f64 {
        let n = self.n;
        let mut stacked = DVector::zeros(n * fields.len());
        for (i, f) in fields.iter().enumerate() {
            let out = f.eval_vec(t, &x[i * n..(i + 1) * n]);
            stacked.rows_mut(i * n, n).copy_from_slice(&out);
        }
        if self.fast_projection.nrows() == 0 {
            return 0.0;
        }
        (&self.fast_projection * stacked).norm()
    }
}

/// Builds `V, V̄, Q, M, L` for the matrices `B_i` on graph `g`.
pub fn build_decomposition(g: &Graph, b_list: &[DMatrix<f64>]) -> Result<DecompositionData> {
    let big_n = g.n_agents();
    if b_list.len() != big_n {
        return Err(Error::DimensionMismatch(format!(
            "{} coupling matrices for {big_n} agents",
            b_list.len()
        )));
    }
    crate::graph::spectral(g)?;
    let n = b_list[0].nrows();
    if b_list.iter().any(|b| b.nrows() != n || b.ncols() != n) {
        return Err(Error::DimensionMismatch("coupling matrices must share one size".into()));
    }
    let splits = b_list
        .iter()
        .map(|b| psd_split(b, 1e-9 * b.amax().max(1.0)))
        .collect::<Result<Vec<_>>>()?;
    let p_bar: usize = splits.iter().map(|s| s.rank).sum();
    let w_net = block_diag(&splits.iter().map(|s| s.w.clone()).collect::<Vec<_>>());
    let z_net = block_diag(&splits.iter().map(|s| s.z.clone()).collect::<Vec<_>>());
    let lambda_net = block_diag(&splits.iter().map(|s| s.lambda.clone()).collect::<Vec<_>>());
    let laplacian_n = kron(&g.laplacian(), &DMatrix::identity(n, n));
    let coupled = &laplacian_n * &w_net * &lambda_net;
    let mut v = kernel_basis(&coupled, DEFAULT_RANK_TOL);
    let p_s = v.ncols();
    if p_s > 0 {
        v = canonical_rotation(&v, &splits[0]);
    }
    let v_bar = orthonormal_complement(&v, p_bar);
    let lw = lambda_net.transpose() * w_net.transpose() * &laplacian_n;
    let fast_projection = v_bar.transpose() * &lw;
    let mut q = &fast_projection * &w_net * &lambda_net * &v_bar;
    q = (&q + q.transpose()) * 0.5;
    let m = if p_s == 0 {
        DMatrix::zeros(n, 0)
    } else {
        &splits[0].w * &splits[0].lambda * v.rows(0, splits[0].rank)
    };
    let l = if v_bar.ncols() == 0 {
        DMatrix::zeros(p_bar, z_net.ncols())
    } else {
        let q_inv = q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Q is not positive definite".into()))?
            .inverse();
        &v_bar * q_inv * &fast_projection * &z_net
    };
    let data = DecompositionData {
        splits,
        v,
        v_bar,
        q,
        m,
        l,
        p_s,
        p_bar,
        n,
        fast_projection,
        w_net,
        lambda_net,
        laplacian_n,
    };
    let report = data.check();
    if !report.holds(DECOMPOSITION_TOL * lambda_max_sym(&g.laplacian()).max(1.0)) {
        return Err(Error::Numerical(format!(
            "decomposition invariants violated: {report:?}"
        )));
    }
    Ok(data)
}

/// Rotates the columns of `v` so that `W_1Λ_1V_1` is lower triangular with
/// a nonnegative diagonal; fixes the basis choice inside `ker`.
fn canonical_rotation(v: &DMatrix<f64>, first: &PsdSplit) -> DMatrix<f64> {
    let m0 = &first.w * &first.lambda * v.rows(0, first.rank);
    let qr = m0.transpose().qr();
    let mut rot = qr.q();
    let r = qr.r();
    for c in 0..rot.ncols().min(r.nrows()) {
        if r[(c, c)] < 0.0 {
            let mut col = rot.column_mut(c);
            col *= -1.0;
        }
    }
    if rot.ncols() < v.ncols() {
        return v.clone();
    }
    v * rot
}

/// Slow state `(ẑ_1, …, ẑ_N, s)` with `ẑ_i ∈ ℝ^{n−p_i}`, `s ∈ ℝ^{p_s}`.
pub fn blended_rank_deficient(fields: &[VectorField], dec: &DecompositionData) -> Result<BlendedModel> {
    let n = dec.n;
    if fields.len() != dec.n_agents() || fields.iter().any(|f| f.dim() != n) {
        return Err(Error::DimensionMismatch(format!(
            "need {} fields of dimension {n}",
            dec.n_agents()
        )));
    }
    let big_n = fields.len();
    let z_dims: Vec<usize> = dec.splits.iter().map(|s| n - s.rank).collect();
    let z_offsets: Vec<usize> = z_dims
        .iter()
        .scan(0, |o, d| {
            let start = *o;
            *o += d;
            Some(start)
        })
        .collect();
    let z_total: usize = z_dims.iter().sum();
    let p_s = dec.p_s;
    let nm = &dec.m * big_n as f64;
    let mut lift = Vec::with_capacity(big_n);
    let mut s_proj = Vec::with_capacity(big_n);
    let mut z_t = Vec::with_capacity(big_n);
    for (i, s) in dec.splits.iter().enumerate() {
        // x_i = Z_i ẑ_i − W_iΛ_iL_i ẑ + NMs as one n × dim matrix.
        let mut a = DMatrix::zeros(n, z_total + p_s);
        let wl = -(&s.w * &s.lambda * dec.l_block(i));
        a.columns_mut(0, z_total).copy_from(&wl);
        let mut zi = a.columns_mut(z_offsets[i], z_dims[i]);
        zi += &s.z;
        a.columns_mut(z_total, p_s).copy_from(&nm);
        lift.push(a);
        let lambda_inv = DMatrix::from_diagonal(&s.lambda.diagonal().map(|l| 1.0 / l));
        s_proj.push(dec.v_block(i).transpose() * lambda_inv * s.w.transpose() / big_n as f64);
        z_t.push(s.z.transpose());
    }
    let dim = z_total + p_s;
    let lift = Arc::new(lift);
    let owned = fields.to_vec();
    let lift_f = Arc::clone(&lift);
    let field = VectorField::new(dim, "blended-rank-deficient", move |t, x, out| {
        let slow = DVector::from_column_slice(x);
        out.fill(0.0);
        for (i, f) in owned.iter().enumerate() {
            let xi = &lift_f[i] * &slow;
            let fi = DVector::from_vec(f.eval_vec(t, xi.as_slice()));
            let dz = &z_t[i] * &fi;
            out[z_offsets[i]..z_offsets[i] + z_dims[i]].copy_from_slice(dz.as_slice());
            let ds = &s_proj[i] * &fi;
            for c in 0..p_s {
                out[z_total + c] += ds[c];
            }
        }
    });
    let reconstruct = move |x: &[f64]| {
        let slow = DVector::from_column_slice(x);
        lift.iter().map(|a| (a * &slow).as_slice().to_vec()).collect()
    };
    Ok(BlendedModel {
        reduced_field: field,
        reconstruct: Arc::new(reconstruct),
        family: BlendedFamily::RankDeficient,
    })
}

/// Largest eigenvalue of `ΘJ + JᵀΘ` over the samples, with `J` from
/// central differences. Negative values indicate contraction on the
/// sampled set.
pub fn contraction_estimate(
    field: &VectorField,
    samples: &[(f64, Vec<f64>)],
    metric: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let n = field.dim();
    if let Some(m) = metric {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch("metric size must match the field".into()));
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for (idx, (t, x)) in samples.iter().enumerate() {
        let j = jacobian(field, *t, x);
        if j.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteJacobian(idx));
        }
        let sym = match metric {
            Some(theta) => theta * &j + j.transpose() * theta,
            None => &j + j.transpose(),
        };
        worst = worst.max(lambda_max_sym(&sym));
    }
    Ok(worst)
}

/// Central-difference Jacobian.
pub fn jacobian(field: &VectorField, t: f64, x: &[f64]) -> DMatrix<f64> {
    let n = field.dim();
    let mut j = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for c in 0..n {
        let h = 1e-6 * x[c].abs().max(1.0);
        xp[c] = x[c] + h;
        field.eval(t, &xp, &mut fp);
        xp[c] = x[c] - h;
        field.eval(t, &xp, &mut fm);
        xp[c] = x[c];
        for r in 0..n {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

pub type InverseMap = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Implicit field `f_s(t, s)` solving `Σ_i V_i(t, f_s − f_i(t, s)) = 0`.
#[derive(Clone)]
pub struct EmergentNodeFunnel {
    fields: Vec<VectorField>,
    maps: Vec<InverseMap>,
}

pub const EMERGENT_TOL: f64 = 1e-12;

impl EmergentNodeFunnel {
    pub fn new(fields: &[VectorField], maps: Vec<InverseMap>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if let Some(f) = fields.iter().find(|f| f.dim() != 1) {
            return Err(Error::DimensionMismatch(format!("'{}' is not scalar", f.label())));
        }
        if maps.len() != fields.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inverse maps for {} agents",
                maps.len(),
                fields.len()
            )));
        }
        Ok(EmergentNodeFunnel {
            fields: fields.to_vec(),
            maps,
        })
    }

    /// Inverse maps `V_i(t, u) = ψ_i(t)·γ⁻¹` read from a node-wise funnel spec.
    pub fn from_spec(fields: &[VectorField], spec: &FunnelSpec) -> Result<Self> {
        if spec.family != FunnelFamily::NodeWise || spec.psi.len() != fields.len() {
            return Err(Error::InvalidArgument(
                "node-wise funnel needs one envelope per agent".into(),
            ));
        }
        let maps = spec
            .psi
            .iter()
            .map(|&psi| {
                let gamma = spec.gamma;
                Arc::new(move |t: f64, u: f64| gamma.inverse(psi.value(t), u)) as InverseMap
            })
            .collect();
        Self::new(fields, maps)
    }

    pub fn value(&self, t: f64, s: f64) -> Result<f64> {
        let f: Vec<f64> = self.fields.iter().map(|fi| fi.eval_vec(t, &[s])[0]).collect();
        let (mut lo, mut hi) = f
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::NoBracket { t, s });
        }
        if hi - lo <= EMERGENT_TOL {
            return Ok(0.5 * (lo + hi));
        }
        let spread = hi - lo;
        for (i, map) in self.maps.iter().enumerate() {
            let (a, b, c) = (map(t, -spread), map(t, 0.0), map(t, spread));
            if !(a < b && b < c) {
                return Err(Error::NotMonotone(i));
            }
        }
        let residual = |c: f64| -> f64 { f.iter().zip(&self.maps).map(|(fi, v)| v(t, c - fi)).sum() };
        let (r_lo, r_hi) = (residual(lo), residual(hi));
        if r_lo > 0.0 || r_hi < 0.0 {
            return Err(Error::NoBracket { t, s });
        }
        if r_lo == 0.0 {
            return Ok(lo);
        }
        if r_hi == 0.0 {
            return Ok(hi);
        }
        while hi - lo > EMERGENT_TOL {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let r = residual(mid);
            if r == 0.0 {
                return Ok(mid);
            }
            if r < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// As a scalar field; solver failures surface as NaN.
    pub fn into_field(self) -> VectorField {
        VectorField::new(1, "emergent-node-funnel", move |t, x, out| {
            out[0] = self.value(t, x[0]).unwrap_or(f64::NAN);
        })
    }
}

/// Scalar emergent field for node-wise funnel coupling.
pub fn emergent_node_funnel(fields: &[VectorField], maps: Vec<InverseMap>) -> Result<VectorField> {
    Ok(EmergentNodeFunnel::new(fields, maps)?.into_field())
}
