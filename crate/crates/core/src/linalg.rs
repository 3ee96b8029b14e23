//! Dense decompositions and gain design used by the observer recipes and the
//! rank-deficient coupling machinery.
//!
//! Rank decisions are relative: a singular value counts as nonzero when it
//! exceeds `tol · σ_max`. [`DEFAULT_RANK_TOL`] is the usual choice.

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{Error, Result};
use crate::graph::sorted_symmetric_eigen;

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Eigen-split of a symmetric PSD matrix: `B = W Λ² Wᵀ`, `[W Z]` orthogonal.
#[derive(Debug, Clone)]
pub struct PsdSplit {
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Diagonal, descending, positive.
    pub lambda: DMatrix<f64>,
    pub rank: usize,
}

/// Split of a pair `(G, S)` into its observable part (`Z`) and its
/// unobservable subspace (`W`).
#[derive(Debug, Clone)]
pub struct ObserverSplit {
    pub z_basis: DMatrix<f64>,
    pub w_basis: DMatrix<f64>,
    pub s_bar: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub u_bar: DMatrix<f64>,
}

impl ObserverSplit {
    /// Dimension of the unobservable subspace.
    pub fn p(&self) -> usize {
        self.w_basis.ncols()
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.s_bar - &self.u_bar * &self.g_bar
    }
}

fn normalize_sign(mut v: DVector<f64>) -> DVector<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v = -v;
        }
    }
    v
}

/// Orthonormal bases of the row space and of the kernel of `m`
/// (both as columns in `ℝ^{ncols}`).
pub fn row_space_and_kernel(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let cols = m.ncols();
    if cols == 0 {
        return (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0));
    }
    let padded = if m.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.rows_mut(0, m.nrows()).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let threshold = tol * sigma_max;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (range_idx, null_idx): (Vec<usize>, Vec<usize>) = order
        .into_iter()
        .partition(|&k| sigma_max > 0.0 && svd.singular_values[k] > threshold);
    let collect = |idx: &[usize]| {
        let columns: Vec<DVector<f64>> = idx.iter().map(|&k| normalize_sign(v_t.row(k).transpose())).collect();
        if columns.is_empty() {
            DMatrix::zeros(cols, 0)
        } else {
            DMatrix::from_columns(&columns)
        }
    };
    (collect(&range_idx), collect(&null_idx))
}

/// Orthonormal basis of `ker(m)`; zero columns when `m` has full column rank.
pub fn kernel_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    row_space_and_kernel(m, tol).1
}

/// Orthonormal basis of the orthogonal complement of `im(v)` in `ℝ^{dim}`.
pub fn orthonormal_complement(v: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if v.ncols() == 0 {
        return DMatrix::identity(dim, dim);
    }
    kernel_basis(&v.transpose(), DEFAULT_RANK_TOL)
}

pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    row_space_and_kernel(m, tol).0.ncols()
}

/// Eigen-split of a symmetric PSD matrix. `tol` is absolute: eigenvalues
/// above it count toward the rank, eigenvalues below `−tol` are rejected.
pub fn psd_split(b: &DMatrix<f64>, tol: f64) -> Result<PsdSplit> {
    if !b.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "psd_split needs a square matrix, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let n = b.nrows();
    let asym = (b - b.transpose()).amax();
    if asym > tol {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (b + b.transpose()) * 0.5;
    let (values, vectors) = sorted_symmetric_eigen(&sym);
    if let Some(&lowest) = values.first() {
        if lowest < -tol {
            return Err(Error::NotPsd(lowest));
        }
    }
    // Descending for W, then the kernel directions.
    let positive: Vec<usize> = (0..n).rev().filter(|&k| values[k] > tol).collect();
    let zero: Vec<usize> = (0..n).filter(|&k| values[k] <= tol).collect();
    let pick = |idx: &[usize]| {
        let mut m = DMatrix::zeros(n, idx.len());
        for (c, &k) in idx.iter().enumerate() {
            m.set_column(c, &vectors.column(k));
        }
        m
    };
    let lambda = DMatrix::from_diagonal(&DVector::from_iterator(
        positive.len(),
        positive.iter().map(|&k| values[k].sqrt()),
    ));
    Ok(PsdSplit {
        w: pick(&positive),
        z: pick(&zero),
        lambda,
        rank: positive.len(),
    })
}

/// `[G; GS; …; GS^{n−1}]`.
pub fn observability_matrix(s: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let q = g.nrows();
    let mut o = DMatrix::zeros(q * n, n);
    let mut block = g.clone();
    for k in 0..n {
        o.rows_mut(k * q, q).copy_from(&block);
        block = &block * s;
    }
    o
}

pub fn is_observable(s: &DMatrix<f64>, g: &DMatrix<f64>, tol: f64) -> bool {
    let n = s.nrows();
    n == 0 || (g.nrows() > 0 && rank(&observability_matrix(s, g), tol) == n)
}

/// Splits `(G, S)` into observable coordinates `Z` and the unobservable
/// subspace `W`, and designs a stabilizing injection for the reduced pair.
pub fn observability_split(s: &DMatrix<f64>, g: &DMatrix<f64>, tol: f64) -> Result<ObserverSplit> {
    let n = s.nrows();
    if !s.is_square() || g.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "S is {}x{}, G is {}x{}",
            s.nrows(),
            s.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    let (z_basis, w_basis) = if g.nrows() == 0 {
        (DMatrix::zeros(n, 0), DMatrix::identity(n, n))
    } else {
        row_space_and_kernel(&observability_matrix(s, g), tol)
    };
    let s_bar = z_basis.transpose() * s * &z_basis;
    let g_bar = g * &z_basis;
    let u_bar = stabilizing_injection(&s_bar, &g_bar)?;
    Ok(ObserverSplit {
        z_basis,
        w_basis,
        s_bar,
        g_bar,
        u_bar,
    })
}

/// Output injection `Ū` with every eigenvalue of `S̄ − ŪḠ` at real part
/// `≤ −0.5`. Single-output pairs get Ackermann placement at `{−1, …, −n}`;
/// multi-output pairs use the dual Riccati gain of the shifted pair.
pub fn stabilizing_injection(s_bar: &DMatrix<f64>, g_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s_bar.nrows();
    let q = g_bar.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, q));
    }
    if !is_observable(s_bar, g_bar, DEFAULT_RANK_TOL) {
        return Err(Error::NotObservable);
    }
    let u = if q == 1 {
        ackermann_injection(s_bar, g_bar)?
    } else {
        riccati_injection(s_bar, g_bar, 0.5)?
    };
    if !is_hurwitz(&(s_bar - &u * g_bar), 0.5 - 1e-9) {
        return Err(Error::Numerical("injection gain failed to place the spectrum".into()));
    }
    Ok(u)
}

fn ackermann_injection(s: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let o = observability_matrix(s, g);
    let identity = DMatrix::<f64>::identity(n, n);
    let mut phi = identity.clone();
    for j in 1..=n {
        phi = &phi * (s + &identity * j as f64);
    }
    let mut e_n = DMatrix::zeros(n, 1);
    e_n[(n - 1, 0)] = 1.0;
    let solved = o
        .lu()
        .solve(&e_n)
        .ok_or_else(|| Error::Numerical("observability matrix is singular".into()))?;
    Ok(phi * solved)
}

/// `Ū = X Ḡᵀ` where `X` solves
/// `(S̄+αI) X + X (S̄+αI)ᵀ − X ḠᵀḠ X + I = 0`.
fn riccati_injection(s: &DMatrix<f64>, g: &DMatrix<f64>, shift: f64) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let a = (s + DMatrix::identity(n, n) * shift).transpose();
    let x = solve_care(&a, &(g.transpose() * g), &DMatrix::identity(n, n))?;
    Ok(x * g.transpose())
}

/// Stabilizing solution of `AᵀX + XA − X G X + Q = 0` from the stable
/// invariant subspace of the Hamiltonian `[[A, −G], [−Q, −Aᵀ]]`.
pub fn solve_care(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let sign = matrix_sign(&h)?;
    let projector = DMatrix::identity(2 * n, 2 * n) - sign;
    let (basis, _) = row_space_and_kernel(&projector.transpose(), 1e-6);
    if basis.ncols() != n {
        return Err(Error::Numerical(format!(
            "Hamiltonian stable subspace has dimension {} (expected {n})",
            basis.ncols()
        )));
    }
    let u1 = basis.rows(0, n).clone_owned();
    let u2 = basis.rows(n, n).clone_owned();
    let u1_inv = u1
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Riccati basis is not invertible".into()))?;
    let x = u2 * u1_inv;
    Ok((&x + x.transpose()) * 0.5)
}

/// Newton iteration with determinant scaling for `sign(M)`.
fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows() as f64;
    let mut z = m.clone();
    for _ in 0..100 {
        let det = z.determinant().abs();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Numerical("matrix sign iteration hit a singular iterate".into()));
        }
        let c = det.powf(-1.0 / n);
        let scaled = &z * c;
        let inv = scaled
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("matrix sign iteration failed".into()))?;
        let next = (scaled + inv) * 0.5;
        let change = (&next - &z).norm();
        z = next;
        if change <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    Err(Error::Numerical("matrix sign iteration did not converge".into()))
}

pub fn complex_eigenvalues(a: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    if a.nrows() == 0 {
        return Some(Vec::new());
    }
    Schur::try_new(a.clone(), f64::EPSILON, 100_000).map(|s| s.complex_eigenvalues().iter().copied().collect())
}

/// Largest real part of the spectrum (`−∞` for an empty matrix).
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    match complex_eigenvalues(a) {
        Some(ev) => ev.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max),
        None => f64::NAN,
    }
}

/// True iff every eigenvalue of `a` has real part `< −margin`.
pub fn is_hurwitz(a: &DMatrix<f64>, margin: f64) -> bool {
    spectral_abscissa(a) < -margin
}

/// PBH test: `rank [λI − S; G] = n` for every eigenvalue with `Re λ ≥ 0`.
pub fn is_detectable(s: &DMatrix<f64>, g: &DMatrix<f64>) -> bool {
    let n = s.nrows();
    let Some(eigs) = complex_eigenvalues(s) else {
        return false;
    };
    let scale = s.amax().max(g.amax()).max(1.0);
    eigs.iter().filter(|l| l.re >= -1e-9 * scale).all(|&lambda| {
        let mut m = DMatrix::<Complex<f64>>::zeros(n + g.nrows(), n);
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                m[(i, j)] = delta - Complex::new(s[(i, j)], 0.0);
            }
        }
        for i in 0..g.nrows() {
            for j in 0..n {
                m[(n + i, j)] = Complex::new(g[(i, j)], 0.0);
            }
        }
        m.rank(1e-8 * scale) == n
    })
}

/// Solves `AᵀP + PA = −Q` by vectorization (desk-scale only).
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = kron(&identity, &at) + kron(&at, &identity);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let vec_p = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov operator is singular".into()))?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        m.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    m
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let (values, _) = sorted_symmetric_eigen(&((m + m.transpose()) * 0.5));
    values[values.len() - 1]
}

pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let (values, _) = sorted_symmetric_eigen(&((m + m.transpose()) * 0.5));
    values[0]
}
