//! Undirected weighted interconnection graphs and their spectral data.
//!
//! Indices are 0-based throughout the library. Scenario files use 1-based
//! indices and are converted at the harness boundary.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An undirected, connected graph with strictly positive edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    /// Unique edges with `i < j`, sorted.
    edges: Vec<(usize, usize, f64)>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    /// Builds a graph from an edge list. Each undirected edge may be listed
    /// once or in both directions, as long as the weights agree.
    pub fn new(n: usize, edge_list: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut unique: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, w) in edge_list {
            let invalid = |reason: &str| Error::InvalidEdge {
                i,
                j,
                reason: reason.to_string(),
            };
            if i >= n || j >= n {
                return Err(invalid("index out of range"));
            }
            if i == j {
                return Err(invalid("self-loop"));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(invalid("weight must be positive and finite"));
            }
            let key = (i.min(j), i.max(j));
            match unique.get(&key) {
                Some(&prev) if prev != w => return Err(invalid("duplicate edge with conflicting weight")),
                _ => {
                    unique.insert(key, w);
                }
            }
        }
        let edges: Vec<_> = unique.into_iter().map(|((i, j), w)| (i, j, w)).collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j, w) in &edges {
            neighbors[i].push((j, w));
            neighbors[j].push((i, w));
        }
        let graph = Graph { n, edges, neighbors };
        if !graph.hop_distances(0).iter().all(Option::is_some) {
            return Err(Error::DisconnectedGraph);
        }
        Ok(graph)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j, 1.0));
            }
        }
        Self::new(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Self::new(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self> {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        if n > 2 {
            edges.push((n - 1, 0, 1.0));
        }
        Self::new(n, &edges)
    }

    /// Random spanning tree plus each remaining pair with probability `p`.
    pub fn random_connected(n: usize, p: f64, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            let r = rng.random_range(0..=k);
            order.swap(k, r);
        }
        let mut present = vec![vec![false; n]; n];
        let mut edges = Vec::new();
        for k in 1..n {
            let parent = order[rng.random_range(0..k)];
            let child = order[k];
            present[parent][child] = true;
            present[child][parent] = true;
            edges.push((parent.min(child), parent.max(child), 1.0));
        }
        for i in 0..n {
            for j in i + 1..n {
                if !present[i][j] && rng.random_bool(p.clamp(0.0, 1.0)) {
                    edges.push((i, j, 1.0));
                }
            }
        }
        Self::new(n, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Neighbors of `i` with their weights `α_ij`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .iter()
            .find(|&&(k, _)| k == j)
            .map_or(0.0, |&(_, w)| w)
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for &(i, j, w) in &self.edges {
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        a
    }

    /// `L = D − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency();
        for i in 0..self.n {
            l[(i, i)] = self.neighbors[i].iter().map(|&(_, w)| w).sum();
        }
        l
    }

    /// True when every pair of agents is joined by an edge of the same weight.
    pub fn uniform_complete_weight(&self) -> Option<f64> {
        let first = self.edges.first().map(|e| e.2)?;
        let full = self.n * (self.n - 1) / 2;
        (self.edges.len() == full && self.edges.iter().all(|e| e.2 == first)).then_some(first)
    }

    fn hop_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &(v, _) in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Hop diameter of the unweighted skeleton.
    pub fn diameter(&self) -> usize {
        (0..self.n)
            .flat_map(|s| self.hop_distances(s))
            .map(|d| d.unwrap_or(usize::MAX))
            .max()
            .unwrap_or(0)
    }

    /// Removes agent `index`; remaining agents are renumbered in order.
    pub fn without_agent(&self, index: usize) -> Result<Self> {
        if index >= self.n {
            return Err(Error::InvalidArgument(format!("no agent {index}")));
        }
        let shift = |k: usize| if k > index { k - 1 } else { k };
        let edges: Vec<_> = self
            .edges
            .iter()
            .filter(|&&(i, j, _)| i != index && j != index)
            .map(|&(i, j, w)| (shift(i), shift(j), w))
            .collect();
        Self::new(self.n - 1, &edges)
    }

    /// Appends a new agent joined to the given neighbors.
    pub fn with_agent(&self, links: &[(usize, f64)]) -> Result<Self> {
        let new = self.n;
        let mut edges = self.edges.clone();
        edges.extend(links.iter().map(|&(j, w)| (j, new, w)));
        Self::new(self.n + 1, &edges)
    }
}

/// Spectral objects of a connected graph.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub laplacian: DMatrix<f64>,
    /// Ascending Laplacian spectrum, `eigenvalues[0] ≈ 0`.
    pub eigenvalues: Vec<f64>,
    pub fiedler_value: f64,
    /// `N × (N−1)`, orthonormal eigenvectors orthogonal to `1_N`.
    pub r_matrix: DMatrix<f64>,
    /// `diag(λ₂, …, λ_N)`.
    pub lambda_diag: DMatrix<f64>,
    pub diameter: usize,
}

impl SpectralData {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// Orders eigenpairs ascending and fixes each eigenvector's sign so that its
/// first significant component is positive.
pub(crate) fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        values.push(eig.eigenvalues[k]);
        let mut v = eig.eigenvectors.column(k).clone_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

pub fn spectral(g: &Graph) -> Result<SpectralData> {
    let n = g.n_agents();
    let laplacian = g.laplacian();
    let (eigenvalues, vectors) = sorted_symmetric_eigen(&laplacian);
    let fiedler_value = if n > 1 { eigenvalues[1] } else { 0.0 };
    if n > 1 && fiedler_value <= 1e-12 * eigenvalues[n - 1].max(1.0) {
        return Err(Error::DisconnectedGraph);
    }
    let r_matrix = vectors.columns(1, n - 1).clone_owned();
    let lambda_diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n - 1,
        eigenvalues[1..].iter().copied(),
    ));
    Ok(SpectralData {
        laplacian,
        eigenvalues,
        fiedler_value,
        r_matrix,
        lambda_diag,
        diameter: g.diameter(),
    })
}

/// Worst pairwise disagreement implied by edge-wise funnels of radius `eta`.
pub fn sync_error_bound_edge(diameter: usize, eta: f64) -> f64 {
    diameter as f64 * eta
}

/// Worst pairwise disagreement implied by node-wise funnels: `2√N·η/λ₂`.
pub fn sync_error_bound_node(n: usize, lambda2: f64, eta: f64) -> Result<f64> {
    if lambda2 <= 0.0 {
        return Err(Error::DisconnectedGraph);
    }
    Ok(2.0 * (n as f64).sqrt() * eta / lambda2)
}
