//! Coupled-network right-hand sides and a deterministic explicit integrator.
//!
//! Every coupling family assembles into a [`NetworkSystem`]: one stacked
//! right-hand side over `col(x_1, …, x_N)` plus the metadata the integrator
//! needs (agent layout, stiffness estimate, funnel envelopes).

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{spectral, Graph};
use crate::linalg::{lambda_max_sym, lambda_min_sym, psd_split};

pub type FieldFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
/// `(t, own, other, out)`: `g_i(t, z, y)` or `h_i(t, y, z)`.
pub type SplitFieldFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// A deterministic vector field `ẋ = f(t, x)` on `ℝ^dim`.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    label: String,
    f: Arc<FieldFn>,
}

impl VectorField {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        VectorField {
            dim,
            label: label.into(),
            f: Arc::new(f),
        }
    }

    /// Scalar field `ẋ = f(t, x)`.
    pub fn scalar(label: impl Into<String>, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(1, label, move |t, x, out| out[0] = f(t, x[0]))
    }

    /// `ẋ = A x + c`.
    pub fn affine(label: impl Into<String>, a: DMatrix<f64>, c: Vec<f64>) -> Self {
        let n = a.nrows();
        Self::new(n, label, move |_, x, out| {
            for i in 0..n {
                let mut acc = c[i];
                for j in 0..n {
                    acc += a[(i, j)] * x[j];
                }
                out[i] = acc;
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.f)(t, x, out)
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval(t, x, &mut out);
        out
    }
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .finish()
    }
}

/// An agent under output coupling: internal state `z ∈ ℝ^{z_dim}` and
/// coupled output state `y ∈ ℝ^{y_dim}`.
#[derive(Clone)]
pub struct OutputAgent {
    pub z_dim: usize,
    pub y_dim: usize,
    g: Arc<SplitFieldFn>,
    h: Arc<SplitFieldFn>,
}

impl OutputAgent {
    pub fn new(
        z_dim: usize,
        y_dim: usize,
        g: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        h: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        OutputAgent {
            z_dim,
            y_dim,
            g: Arc::new(g),
            h: Arc::new(h),
        }
    }

    /// Agent without internal state: `ẏ = f(t, y)`.
    pub fn from_field(field: &VectorField) -> Self {
        let f = field.clone();
        Self::new(0, field.dim(), |_, _, _, _| {}, move |t, y, _, out| f.eval(t, y, out))
    }

    #[inline]
    pub fn eval_g(&self, t: f64, z: &[f64], y: &[f64], out: &mut [f64]) {
        (self.g)(t, z, y, out)
    }

    #[inline]
    pub fn eval_h(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.h)(t, y, z, out)
    }
}

impl fmt::Debug for OutputAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutputAgent")
            .field("z_dim", &self.z_dim)
            .field("y_dim", &self.y_dim)
            .finish()
    }
}

/// `ψ(t) = (ψ̄ − η)·e^{−λ(t − t₀)} + η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiEnvelope {
    pub psi_bar: f64,
    pub eta: f64,
    pub lambda: f64,
    #[serde(default)]
    pub t0: f64,
}

impl PsiEnvelope {
    pub fn new(psi_bar: f64, eta: f64, lambda: f64) -> Self {
        PsiEnvelope {
            psi_bar,
            eta,
            lambda,
            t0: 0.0,
        }
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        (self.psi_bar - self.eta) * (-self.lambda * (t - self.t0)).exp() + self.eta
    }

    pub fn infimum(&self) -> f64 {
        self.psi_bar.min(self.eta)
    }

    fn validate(&self) -> Result<()> {
        if self.psi_bar > 0.0 && self.eta > 0.0 && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "funnel envelope needs psi_bar > 0, eta > 0, lambda >= 0: {self:?}"
            )))
        }
    }
}

/// Largest ratio `|ν|/ψ` fed to a gain; the gains blow up at 1.
pub const FUNNEL_RATIO_CLAMP: f64 = 1.0 - 1e-9;

/// Gain families `γ : [0, 1) → ℝ≥0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FunnelGain {
    /// `γ(s) = 1/(1 − s)`.
    Inverse,
    /// `γ(s) = (δ/s)·tan(πs/2)`, `γ(0) = πδ/2`.
    Arctan { delta: f64 },
}

impl FunnelGain {
    pub fn gain(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, FUNNEL_RATIO_CLAMP);
        match *self {
            FunnelGain::Inverse => 1.0 / (1.0 - s),
            FunnelGain::Arctan { delta } => {
                if s < 1e-12 {
                    std::f64::consts::FRAC_PI_2 * delta
                } else {
                    delta / s * (std::f64::consts::FRAC_PI_2 * s).tan()
                }
            }
        }
    }

    /// `γ(|r|)·r` for the signed ratio `r = ν/ψ`.
    #[inline]
    pub fn coupling(&self, r: f64) -> f64 {
        let s = r.abs().min(FUNNEL_RATIO_CLAMP);
        self.gain(s) * s.copysign(r)
    }

    /// The inverse map `ν = V(ψ, u)` of `u = γ(|ν|/ψ)·ν/ψ`.
    pub fn inverse(&self, psi: f64, u: f64) -> f64 {
        match *self {
            FunnelGain::Inverse => psi * u / (1.0 + u.abs()),
            FunnelGain::Arctan { delta } => psi * 2.0 / std::f64::consts::PI * (u / delta).atan(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelFamily {
    EdgeWise,
    NodeWise,
}

/// Funnel envelopes: one per edge (in [`Graph::edges`] order) for the
/// edge-wise family, one per agent for the node-wise family.
#[derive(Debug, Clone, PartialEq)]
pub struct FunnelSpec {
    pub family: FunnelFamily,
    pub gamma: FunnelGain,
    pub psi: Vec<PsiEnvelope>,
}

impl FunnelSpec {
    pub fn uniform(family: FunnelFamily, g: &Graph, gamma: FunnelGain, psi: PsiEnvelope) -> Self {
        let count = match family {
            FunnelFamily::EdgeWise => g.edges().len(),
            FunnelFamily::NodeWise => g.n_agents(),
        };
        FunnelSpec {
            family,
            gamma,
            psi: vec![psi; count],
        }
    }
}

/// Funnel layout carried by a network so the integrator can monitor
/// `|ν|/ψ` on every accepted step.
#[derive(Debug, Clone)]
pub struct FunnelMonitor {
    pub spec: FunnelSpec,
    pub graph: Graph,
}

impl FunnelMonitor {
    /// `(ν, ψ(t))` per edge or per node. Scalar agents only.
    pub fn values(&self, t: f64, x: &[f64]) -> Vec<(f64, f64)> {
        match self.spec.family {
            FunnelFamily::EdgeWise => self
                .graph
                .edges()
                .iter()
                .zip(&self.spec.psi)
                .map(|(&(i, j, _), psi)| (x[j] - x[i], psi.value(t)))
                .collect(),
            FunnelFamily::NodeWise => (0..self.graph.n_agents())
                .zip(&self.spec.psi)
                .map(|(i, psi)| (node_disagreement(&self.graph, x, i), psi.value(t)))
                .collect(),
        }
    }

    pub fn max_ratio(&self, t: f64, x: &[f64]) -> f64 {
        self.values(t, x)
            .into_iter()
            .map(|(nu, psi)| nu.abs() / psi)
            .fold(0.0, f64::max)
    }

    /// `ψ − |ν|` per edge or node.
    pub fn margins(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.values(t, x).into_iter().map(|(nu, psi)| psi - nu.abs()).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        match self.spec.family {
            FunnelFamily::EdgeWise => self
                .graph
                .edges()
                .iter()
                .map(|&(i, j, _)| format!("{}-{}", i + 1, j + 1))
                .collect(),
            FunnelFamily::NodeWise => (1..=self.graph.n_agents()).map(|i| i.to_string()).collect(),
        }
    }
}

#[inline]
fn node_disagreement(g: &Graph, x: &[f64], i: usize) -> f64 {
    g.neighbors(i).iter().map(|&(j, a)| a * (x[j] - x[i])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    State,
    Output,
    RankDeficient,
    EdgeFunnel,
    NodeFunnel,
    Uncoupled,
}

/// Diffusive term `Σ_j α_ij (x_j − x_i)` on equal-width blocks.
#[derive(Debug, Clone)]
struct Diffusion {
    neighbors: Vec<Vec<(usize, f64)>>,
    complete_weight: Option<f64>,
}

impl Diffusion {
    fn new(g: &Graph) -> Self {
        Diffusion {
            neighbors: (0..g.n_agents()).map(|i| g.neighbors(i).to_vec()).collect(),
            complete_weight: g.uniform_complete_weight(),
        }
    }

    /// Writes the diffusive term of agent `i` (block width `w` at
    /// `offsets[i]`) into `out`. `sum` must hold `Σ_j x_j` blockwise when the
    /// graph is uniformly complete.
    #[inline]
    fn term(&self, x: &[f64], offsets: &[usize], w: usize, i: usize, sum: &[f64], out: &mut [f64]) {
        let oi = offsets[i];
        if let Some(a) = self.complete_weight {
            let n = self.neighbors.len() as f64;
            for c in 0..w {
                out[c] = a * (sum[c] - n * x[oi + c]);
            }
            return;
        }
        out[..w].fill(0.0);
        for &(j, a) in &self.neighbors[i] {
            let oj = offsets[j];
            for c in 0..w {
                out[c] += a * (x[oj + c] - x[oi + c]);
            }
        }
    }

    fn block_sum(&self, x: &[f64], offsets: &[usize], w: usize, sum: &mut [f64]) {
        if self.complete_weight.is_none() {
            return;
        }
        sum[..w].fill(0.0);
        for &o in offsets {
            for c in 0..w {
                sum[c] += x[o + c];
            }
        }
    }
}

/// An assembled network right-hand side.
#[derive(Clone)]
pub struct NetworkSystem {
    pub total_dim: usize,
    rhs: Arc<FieldFn>,
    pub kind: CouplingKind,
    pub k: Option<f64>,
    pub agent_slices: Vec<Range<usize>>,
    /// Components compared by the synchronization diagnostic.
    pub sync_slices: Vec<Range<usize>>,
    /// Estimate of the fastest linear mode; caps explicit steps.
    pub stiffness_scale: f64,
    pub funnel: Option<FunnelMonitor>,
}

impl fmt::Debug for NetworkSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetworkSystem")
            .field("total_dim", &self.total_dim)
            .field("kind", &self.kind)
            .field("k", &self.k)
            .field("agent_slices", &self.agent_slices)
            .field("stiffness_scale", &self.stiffness_scale)
            .finish()
    }
}

impl NetworkSystem {
    /// A network with a hand-built right-hand side. `total_dim` may exceed
    /// the agent slices (exogenous states such as a plant being observed).
    pub fn custom(
        total_dim: usize,
        kind: CouplingKind,
        k: Option<f64>,
        agent_slices: Vec<Range<usize>>,
        sync_slices: Vec<Range<usize>>,
        stiffness_scale: f64,
        rhs: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        NetworkSystem {
            total_dim,
            rhs: Arc::new(rhs),
            kind,
            k,
            agent_slices,
            sync_slices,
            stiffness_scale,
            funnel: None,
        }
    }

    /// A single uncoupled field viewed as a one-agent network.
    pub fn single(field: &VectorField) -> Self {
        let f = field.clone();
        let n = field.dim();
        Self::custom(
            n,
            CouplingKind::Uncoupled,
            None,
            vec![0..n],
            vec![0..n],
            0.0,
            move |t, x, out| f.eval(t, x, out),
        )
    }

    pub fn n_agents(&self) -> usize {
        self.agent_slices.len()
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.rhs)(t, x, out)
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total_dim];
        self.eval(t, x, &mut out);
        out
    }
}

fn check_connected_for_coupling(g: &Graph, n_fields: usize) -> Result<f64> {
    if g.n_agents() != n_fields {
        return Err(Error::DimensionMismatch(format!(
            "graph has {} agents, {} fields given",
            g.n_agents(),
            n_fields
        )));
    }
    Ok(spectral(g)?.lambda_max())
}

fn common_dim(fields: &[VectorField]) -> Result<usize> {
    let n = fields.first().map(VectorField::dim).ok_or(Error::EmptyGraph)?;
    if let Some(bad) = fields.iter().find(|f| f.dim() != n) {
        return Err(Error::DimensionMismatch(format!(
            "field '{}' has dimension {}, expected {n}",
            bad.label(),
            bad.dim()
        )));
    }
    Ok(n)
}

/// `ẋ_i = f_i(t, x_i) + k Σ_j α_ij (x_j − x_i)`.
pub fn assemble_state_coupled(fields: &[VectorField], g: &Graph, k: f64) -> Result<NetworkSystem> {
    let n = common_dim(fields)?;
    let lambda_max = check_connected_for_coupling(g, fields.len())?;
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coupling gain must be positive, got {k}"
        )));
    }
    let n_agents = fields.len();
    let slices: Vec<_> = (0..n_agents).map(|i| i * n..(i + 1) * n).collect();
    let offsets: Vec<usize> = slices.iter().map(|r| r.start).collect();
    let diffusion = Diffusion::new(g);
    let fields = fields.to_vec();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        let mut sum = vec![0.0; n];
        let mut term = vec![0.0; n];
        diffusion.block_sum(x, &offsets, n, &mut sum);
        for (i, f) in fields.iter().enumerate() {
            let o = offsets[i];
            f.eval(t, &x[o..o + n], &mut out[o..o + n]);
            diffusion.term(x, &offsets, n, i, &sum, &mut term);
            for c in 0..n {
                out[o + c] += k * term[c];
            }
        }
    };
    Ok(NetworkSystem::custom(
        n * n_agents,
        CouplingKind::State,
        Some(k),
        slices.clone(),
        slices,
        k * lambda_max,
        rhs,
    ))
}

/// `ż_i = g_i(t, z_i, y_i)`, `ẏ_i = h_i(t, y_i, z_i) + kΛ Σ_j α_ij (y_j − y_i)`.
///
/// Agent `i` occupies `[z_i, y_i]` in the stacked state.
pub fn assemble_output_coupled(
    agents: &[OutputAgent],
    weight: &DMatrix<f64>,
    g: &Graph,
    k: f64,
) -> Result<NetworkSystem> {
    let n = agents.first().map(|a| a.y_dim).ok_or(Error::EmptyGraph)?;
    if agents.iter().any(|a| a.y_dim != n) || weight.nrows() != n || weight.ncols() != n {
        return Err(Error::DimensionMismatch(
            "output states and weight must share one dimension".into(),
        ));
    }
    if (weight - weight.transpose()).amax() > 1e-12 * weight.amax().max(1.0) || !(lambda_min_sym(weight) > 0.0) {
        return Err(Error::WeightNotPd);
    }
    let lambda_max = check_connected_for_coupling(g, agents.len())?;
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coupling gain must be positive, got {k}"
        )));
    }
    let mut slices = Vec::with_capacity(agents.len());
    let mut sync = Vec::with_capacity(agents.len());
    let mut offset = 0;
    for a in agents {
        slices.push(offset..offset + a.z_dim + n);
        sync.push(offset + a.z_dim..offset + a.z_dim + n);
        offset += a.z_dim + n;
    }
    let total = offset;
    let y_offsets: Vec<usize> = sync.iter().map(|r| r.start).collect();
    let z_offsets: Vec<usize> = slices.iter().map(|r| r.start).collect();
    let diffusion = Diffusion::new(g);
    let identity_weight = *weight == DMatrix::identity(n, n);
    let w = weight.clone();
    let stiffness = k * lambda_max * lambda_max_sym(weight);
    let agents = agents.to_vec();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        let mut sum = vec![0.0; n];
        let mut term = vec![0.0; n];
        diffusion.block_sum(x, &y_offsets, n, &mut sum);
        for (i, a) in agents.iter().enumerate() {
            let (zo, yo) = (z_offsets[i], y_offsets[i]);
            let z = &x[zo..yo];
            let y = &x[yo..yo + n];
            a.eval_g(t, z, y, &mut out[zo..yo]);
            a.eval_h(t, y, z, &mut out[yo..yo + n]);
            diffusion.term(x, &y_offsets, n, i, &sum, &mut term);
            if identity_weight {
                for c in 0..n {
                    out[yo + c] += k * term[c];
                }
            } else {
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += w[(r, c)] * term[c];
                    }
                    out[yo + r] += k * acc;
                }
            }
        }
    };
    Ok(NetworkSystem::custom(
        total,
        CouplingKind::Output,
        Some(k),
        slices,
        sync,
        stiffness,
        rhs,
    ))
}

/// `ẋ_i = f_i(t, x_i) + k B_i Σ_j α_ij (x_j − x_i)` with `B_i ⪰ 0`.
pub fn assemble_rank_deficient(
    fields: &[VectorField],
    g: &Graph,
    k: f64,
    b_list: &[DMatrix<f64>],
) -> Result<NetworkSystem> {
    let n = common_dim(fields)?;
    if b_list.len() != fields.len() || b_list.iter().any(|b| b.nrows() != n || b.ncols() != n) {
        return Err(Error::DimensionMismatch(format!(
            "need {} coupling matrices of size {n}x{n}",
            fields.len()
        )));
    }
    let mut b_max: f64 = 0.0;
    for b in b_list {
        let split = psd_split(b, 1e-9 * b.amax().max(1.0))?;
        b_max = b_max.max(split.lambda.diagonal().iter().map(|l| l * l).fold(0.0, f64::max));
    }
    let lambda_max = check_connected_for_coupling(g, fields.len())?;
    if !(k > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coupling gain must be positive, got {k}"
        )));
    }
    let n_agents = fields.len();
    let slices: Vec<_> = (0..n_agents).map(|i| i * n..(i + 1) * n).collect();
    let offsets: Vec<usize> = slices.iter().map(|r| r.start).collect();
    let diffusion = Diffusion::new(g);
    let fields = fields.to_vec();
    let b_list = b_list.to_vec();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        let mut sum = vec![0.0; n];
        let mut term = vec![0.0; n];
        diffusion.block_sum(x, &offsets, n, &mut sum);
        for (i, f) in fields.iter().enumerate() {
            let o = offsets[i];
            f.eval(t, &x[o..o + n], &mut out[o..o + n]);
            diffusion.term(x, &offsets, n, i, &sum, &mut term);
            let b = &b_list[i];
            for r in 0..n {
                let mut acc = 0.0;
                for c in 0..n {
                    acc += b[(r, c)] * term[c];
                }
                out[o + r] += k * acc;
            }
        }
    };
    Ok(NetworkSystem::custom(
        n * n_agents,
        CouplingKind::RankDeficient,
        Some(k),
        slices.clone(),
        slices,
        k * lambda_max * b_max,
        rhs,
    ))
}

fn scalar_fields(fields: &[VectorField]) -> Result<()> {
    match fields.iter().find(|f| f.dim() != 1) {
        Some(f) => Err(Error::DimensionMismatch(format!(
            "funnel coupling needs scalar agents; '{}' has dimension {}",
            f.label(),
            f.dim()
        ))),
        None => Ok(()),
    }
}

fn funnel_stiffness(lambda_max: f64, spec: &FunnelSpec) -> f64 {
    let psi_min = spec.psi.iter().map(PsiEnvelope::infimum).fold(f64::INFINITY, f64::min);
    if psi_min.is_finite() {
        lambda_max * spec.gamma.gain(0.0) / psi_min
    } else {
        0.0
    }
}

/// `u_i = Σ_j γ(|ν_ij|/ψ_ij)·ν_ij/ψ_ij`, `ν_ij = x_j − x_i`.
pub fn assemble_edge_funnel(fields: &[VectorField], g: &Graph, spec: &FunnelSpec) -> Result<NetworkSystem> {
    scalar_fields(fields)?;
    let lambda_max = check_connected_for_coupling(g, fields.len())?;
    if spec.family != FunnelFamily::EdgeWise || spec.psi.len() != g.edges().len() {
        return Err(Error::InvalidArgument(
            "edge-wise funnel needs one envelope per edge".into(),
        ));
    }
    spec.psi.iter().try_for_each(PsiEnvelope::validate)?;
    let n_agents = fields.len();
    // Per-agent list of (neighbor, edge index).
    let mut incident: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_agents];
    for (e, &(i, j, _)) in g.edges().iter().enumerate() {
        incident[i].push((j, e));
        incident[j].push((i, e));
    }
    let gamma = spec.gamma;
    let envelopes = spec.psi.clone();
    let fields_owned = fields.to_vec();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        for (i, f) in fields_owned.iter().enumerate() {
            f.eval(t, &x[i..i + 1], &mut out[i..i + 1]);
            let mut u = 0.0;
            for &(j, e) in &incident[i] {
                u += gamma.coupling((x[j] - x[i]) / envelopes[e].value(t));
            }
            out[i] += u;
        }
    };
    let slices: Vec<_> = (0..n_agents).map(|i| i..i + 1).collect();
    let mut sys = NetworkSystem::custom(
        n_agents,
        CouplingKind::EdgeFunnel,
        None,
        slices.clone(),
        slices,
        funnel_stiffness(lambda_max, spec),
        rhs,
    );
    sys.funnel = Some(FunnelMonitor {
        spec: spec.clone(),
        graph: g.clone(),
    });
    Ok(sys)
}

/// `u_i = γ_i(|ν_i|/ψ_i)·ν_i/ψ_i`, `ν_i = Σ_j α_ij (x_j − x_i)`.
pub fn assemble_node_funnel(fields: &[VectorField], g: &Graph, spec: &FunnelSpec) -> Result<NetworkSystem> {
    scalar_fields(fields)?;
    let lambda_max = check_connected_for_coupling(g, fields.len())?;
    if spec.family != FunnelFamily::NodeWise || spec.psi.len() != g.n_agents() {
        return Err(Error::InvalidArgument(
            "node-wise funnel needs one envelope per agent".into(),
        ));
    }
    spec.psi.iter().try_for_each(PsiEnvelope::validate)?;
    let n_agents = fields.len();
    let gamma = spec.gamma;
    let envelopes = spec.psi.clone();
    let graph = g.clone();
    let fields_owned = fields.to_vec();
    let rhs = move |t: f64, x: &[f64], out: &mut [f64]| {
        for (i, f) in fields_owned.iter().enumerate() {
            f.eval(t, &x[i..i + 1], &mut out[i..i + 1]);
            let nu = node_disagreement(&graph, x, i);
            out[i] += gamma.coupling(nu / envelopes[i].value(t));
        }
    };
    let slices: Vec<_> = (0..n_agents).map(|i| i..i + 1).collect();
    let mut sys = NetworkSystem::custom(
        n_agents,
        CouplingKind::NodeFunnel,
        None,
        slices.clone(),
        slices,
        funnel_stiffness(lambda_max, spec),
        rhs,
    );
    sys.funnel = Some(FunnelMonitor {
        spec: spec.clone(),
        graph: g.clone(),
    });
    Ok(sys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Rkf45,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: Method,
    /// Fixed step (rk4) or initial and maximum step (rkf45).
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Spacing of recorded samples; `None` records every accepted step.
    pub output_dt: Option<f64>,
    /// Adaptive steps below this signal a failure.
    pub h_min: f64,
    /// Steps are capped at `stiffness_factor / stiffness_scale`.
    pub stiffness_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: Method::Rk4,
            h: 1e-3,
            rtol: 1e-8,
            atol: 1e-10,
            output_dt: None,
            h_min: 1e-12,
            stiffness_factor: STIFFNESS_STEP_FACTOR,
        }
    }
}

impl SolverOptions {
    pub fn rk4(h: f64) -> Self {
        SolverOptions {
            method: Method::Rk4,
            h,
            ..Default::default()
        }
    }

    pub fn rkf45(h: f64, rtol: f64, atol: f64) -> Self {
        SolverOptions {
            method: Method::Rkf45,
            h,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn with_output_dt(mut self, dt: f64) -> Self {
        self.output_dt = Some(dt);
        self
    }

    pub fn with_stiffness_factor(mut self, factor: f64) -> Self {
        self.stiffness_factor = factor;
        self
    }
}

/// Default step cap relative to the stiffness estimate.
pub const STIFFNESS_STEP_FACTOR: f64 = 0.2;

/// Largest accepted cap factor, inside the real stability interval of
/// both explicit methods.
pub const MAX_STIFFNESS_FACTOR: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverMeta {
    pub method: Option<Method>,
    pub steps: usize,
    pub rejected: usize,
    /// Step actually used (rk4) or the cap applied (rkf45).
    pub h_effective: f64,
    pub stiffness_limited: bool,
    pub min_step: f64,
    pub max_step: f64,
    /// Largest `|ν|/ψ` over every accepted step (funnel systems).
    pub max_funnel_ratio: Option<f64>,
}

/// Recorded samples of an integration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub agent_slices: Vec<Range<usize>>,
    pub sync_slices: Vec<Range<usize>>,
    /// Max pairwise disagreement at each sample.
    pub sync_error: Vec<f64>,
    /// Per-edge (or per-node) `ψ − |ν|` at each sample, funnel systems only.
    pub funnel_margins: Vec<Vec<f64>>,
    pub funnel_labels: Vec<String>,
    pub meta: SolverMeta,
}

impl Trajectory {
    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn agent_state<'a>(&self, state: &'a [f64], agent: usize) -> &'a [f64] {
        &state[self.agent_slices[agent].clone()]
    }

    /// Index of the first sample with `t ≥ time`.
    pub fn index_at(&self, time: f64) -> usize {
        self.times.partition_point(|&t| t < time).min(self.times.len() - 1)
    }
}

/// `max_{i,j} ‖x_i − x_j‖` over the given component ranges.
pub fn pairwise_disagreement(x: &[f64], slices: &[Range<usize>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, ra) in slices.iter().enumerate() {
        for rb in &slices[a + 1..] {
            let d: f64 = x[ra.clone()]
                .iter()
                .zip(&x[rb.clone()])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
    }
    worst
}

/// Synchronization error series of a trajectory.
pub fn sync_error(traj: &Trajectory) -> Vec<f64> {
    traj.states
        .iter()
        .map(|x| pairwise_disagreement(x, &traj.sync_slices))
        .collect()
}

pub fn integrate(sys: &NetworkSystem, x0: &[f64], t0: f64, t_end: f64, opts: &SolverOptions) -> Result<Trajectory> {
    integrate_observed(sys, x0, t0, t_end, opts, |_, _| {})
}

struct Recorder<'a> {
    sys: &'a NetworkSystem,
    traj: Trajectory,
}

impl Recorder<'_> {
    fn push(&mut self, t: f64, x: &[f64]) {
        self.traj.times.push(t);
        self.traj.states.push(x.to_vec());
        self.traj
            .sync_error
            .push(pairwise_disagreement(x, &self.sys.sync_slices));
        if let Some(f) = &self.sys.funnel {
            self.traj.funnel_margins.push(f.margins(t, x));
        }
    }
}

/// Like [`integrate`], calling `on_step(t, x)` after every accepted step.
pub fn integrate_observed(
    sys: &NetworkSystem,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    opts: &SolverOptions,
    mut on_step: impl FnMut(f64, &[f64]),
) -> Result<Trajectory> {
    if x0.len() != sys.total_dim {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} components, system has {}",
            x0.len(),
            sys.total_dim
        )));
    }
    if !(t_end > t0) {
        return Err(Error::InvalidArgument(format!("t_end {t_end} must exceed t0 {t0}")));
    }
    if !(opts.h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", opts.h)));
    }
    if !(opts.stiffness_factor > 0.0 && opts.stiffness_factor <= MAX_STIFFNESS_FACTOR) {
        return Err(Error::InvalidArgument(format!(
            "stiffness factor must lie in (0, {MAX_STIFFNESS_FACTOR}], got {}",
            opts.stiffness_factor
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { t: t0 });
    }
    let mut max_ratio = None;
    if let Some(funnel) = &sys.funnel {
        let labels = funnel.labels();
        for (idx, (nu, psi)) in funnel.values(t0, x0).into_iter().enumerate() {
            if !(nu.abs() < psi) {
                return Err(Error::FunnelViolationAtStart {
                    location: labels[idx].clone(),
                    nu,
                    psi,
                });
            }
        }
        max_ratio = Some(funnel.max_ratio(t0, x0));
    }
    let h_cap = if sys.stiffness_scale > 0.0 {
        opts.stiffness_factor / sys.stiffness_scale
    } else {
        f64::INFINITY
    };
    let mut rec = Recorder {
        sys,
        traj: Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            agent_slices: sys.agent_slices.clone(),
            sync_slices: sys.sync_slices.clone(),
            sync_error: Vec::new(),
            funnel_margins: Vec::new(),
            funnel_labels: sys.funnel.as_ref().map(FunnelMonitor::labels).unwrap_or_default(),
            meta: SolverMeta {
                method: Some(opts.method),
                stiffness_limited: h_cap < opts.h,
                max_funnel_ratio: max_ratio,
                ..Default::default()
            },
        },
    };
    rec.push(t0, x0);
    match opts.method {
        Method::Rk4 => run_rk4(sys, x0, t0, t_end, opts, h_cap, &mut rec, &mut on_step)?,
        Method::Rkf45 => run_rkf45(sys, x0, t0, t_end, opts, h_cap, &mut rec, &mut on_step)?,
    }
    Ok(rec.traj)
}

struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        Rk4Work {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, sys: &NetworkSystem, t: f64, h: f64, x: &mut [f64]) {
        let n = x.len();
        sys.eval(t, x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        sys.eval(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        sys.eval(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        sys.eval(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_rk4(
    sys: &NetworkSystem,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    opts: &SolverOptions,
    h_cap: f64,
    rec: &mut Recorder<'_>,
    on_step: &mut impl FnMut(f64, &[f64]),
) -> Result<()> {
    let span = t_end - t0;
    let h_target = opts.h.min(h_cap);
    let n_steps = (span / h_target).ceil().max(1.0) as usize;
    let h = span / n_steps as f64;
    let stride = opts.output_dt.map_or(1, |dt| ((dt / h).round() as usize).max(1));
    let mut x = x0.to_vec();
    let mut work = Rk4Work::new(x.len());
    for step in 1..=n_steps {
        let t_prev = t0 + (step - 1) as f64 * h;
        work.step(sys, t_prev, h, &mut x);
        let t = if step == n_steps { t_end } else { t0 + step as f64 * h };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        if let Some(funnel) = &sys.funnel {
            let ratio = funnel.max_ratio(t, &x);
            if !(ratio < 1.0) {
                return Err(Error::FunnelBreach { t, ratio });
            }
            let m = rec.traj.meta.max_funnel_ratio.get_or_insert(0.0);
            *m = m.max(ratio);
        }
        on_step(t, &x);
        if step % stride == 0 || step == n_steps {
            rec.push(t, &x);
        }
    }
    let meta = &mut rec.traj.meta;
    meta.steps = n_steps;
    meta.h_effective = h;
    meta.min_step = h;
    meta.max_step = h;
    Ok(())
}

// Fehlberg 4(5) tableau; the fifth-order solution is propagated.
const F_C: [f64; 6] = [0.0, 0.25, 3.0 / 8.0, 12.0 / 13.0, 1.0, 0.5];
const F_A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const F_B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];
const F_B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0];

#[allow(clippy::too_many_arguments)]
fn run_rkf45(
    sys: &NetworkSystem,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    opts: &SolverOptions,
    h_cap: f64,
    rec: &mut Recorder<'_>,
    on_step: &mut impl FnMut(f64, &[f64]),
) -> Result<()> {
    let n = x0.len();
    let h_max = opts.h.min(h_cap);
    let mut h = h_max;
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k = vec![vec![0.0; n]; 6];
    let mut tmp = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut next_output = opts.output_dt.map(|dt| t0 + dt);
    let mut ratio_now = sys.funnel.as_ref().map(|f| f.max_ratio(t0, x0));
    let (mut min_step, mut max_step) = (f64::INFINITY, 0.0f64);
    let (mut steps, mut rejected) = (0usize, 0usize);
    while t < t_end {
        let last = t + h >= t_end;
        let h_try = if last { t_end - t } else { h };
        if h_try < opts.h_min && !last {
            return Err(Error::StepUnderflow { t, h: h_try });
        }
        for s in 0..6 {
            for i in 0..n {
                let mut acc = x[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h_try * F_A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            sys.eval(t + F_C[s] * h_try, &tmp, &mut k[s]);
        }
        let mut err: f64 = 0.0;
        let mut finite = true;
        for i in 0..n {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..6 {
                hi += F_B5[s] * k[s][i];
                lo += F_B4[s] * k[s][i];
            }
            x_new[i] = x[i] + h_try * hi;
            finite &= x_new[i].is_finite();
            let scale = opts.atol + opts.rtol * x[i].abs().max(x_new[i].abs());
            err = err.max((h_try * (hi - lo)).abs() / scale);
        }
        let t_new = if last { t_end } else { t + h_try };
        let accept = finite && err <= 1.0;
        let mut ratio_new = None;
        if accept {
            if let Some(funnel) = &sys.funnel {
                let post = funnel.max_ratio(t_new, &x_new);
                let pre = ratio_now.unwrap_or(0.0);
                let outside = !(post < 1.0);
                let rushed = post > 0.99 && (1.0 - post) < 0.5 * (1.0 - pre);
                if outside || rushed {
                    rejected += 1;
                    h = h_try * 0.5;
                    if h < opts.h_min {
                        return Err(Error::StepUnderflow { t, h });
                    }
                    continue;
                }
                ratio_new = Some(post);
            }
        }
        if accept {
            t = t_new;
            std::mem::swap(&mut x, &mut x_new);
            steps += 1;
            min_step = min_step.min(h_try);
            max_step = max_step.max(h_try);
            if let Some(r) = ratio_new {
                ratio_now = Some(r);
                let m = rec.traj.meta.max_funnel_ratio.get_or_insert(0.0);
                *m = m.max(r);
            }
            on_step(t, &x);
            let record = match next_output.as_mut() {
                None => true,
                Some(next) => {
                    let due = t >= *next - 1e-12 * t.abs().max(1.0);
                    if due {
                        let dt = opts.output_dt.unwrap_or(1.0);
                        while *next <= t + 1e-12 * t.abs().max(1.0) {
                            *next += dt;
                        }
                    }
                    due
                }
            };
            if record || t >= t_end {
                rec.push(t, &x);
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h_try * factor).min(h_max).max(if last { h } else { 0.0 });
        } else {
            if !finite && h_try <= opts.h_min {
                return Err(Error::NonFiniteState { t });
            }
            rejected += 1;
            let factor = if finite {
                (0.9 * err.powf(-0.25)).clamp(0.1, 0.9)
            } else {
                0.1
            };
            h = h_try * factor;
            if h < opts.h_min {
                return if finite {
                    Err(Error::StepUnderflow { t, h })
                } else {
                    Err(Error::NonFiniteState { t })
                };
            }
        }
    }
    let meta = &mut rec.traj.meta;
    meta.steps = steps;
    meta.rejected = rejected;
    meta.h_effective = h_max;
    meta.min_step = min_step;
    meta.max_step = max_step;
    Ok(())
}
