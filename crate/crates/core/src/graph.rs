//! Graph and operator primitives.
//!
//! Conventions used throughout the crate:
//!
//! * `vec(A)` stacks the columns of a `K x K` matrix, so entry `(m, n)` sits at
//!   position `n * K + m`.
//! * The half-vectorisation `upper(A)` lists the strictly upper entries in the
//!   order `(0,1), (0,2), ..., (0,K-1), (1,2), ...`.
//!
//! The selector `T` (full vec to half vector) and the degree map `B`
//! (half vector to node degrees) are applied as index maps and never
//! materialised.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FedGraphError, Result};

/// Stacked client parameters, one row per client. Also used for binary masks.
pub type ParamMatrix = Array2<f64>;

/// Number of unordered pairs among `k` nodes.
#[inline]
pub fn n_pairs(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Position of the pair `(m, n)`, `m < n`, in the half vector.
#[inline]
pub fn pair_index(k: usize, m: usize, n: usize) -> usize {
    debug_assert!(m < n && n < k);
    m * k - m * (m + 1) / 2 + (n - m - 1)
}

/// Iterates over `(edge_index, m, n)` in half-vector order.
pub fn pairs(k: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..k)
        .flat_map(move |m| (m + 1..k).map(move |n| (m, n)))
        .enumerate()
        .map(|(e, (m, n))| (e, m, n))
}

/// Symmetric, zero-diagonal, nonnegative edge weights stored as the upper
/// half vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphWeights {
    n_nodes: usize,
    w: Array1<f64>,
}

impl GraphWeights {
    pub fn new(n_nodes: usize, w: Array1<f64>) -> Result<Self> {
        if w.len() != n_pairs(n_nodes) {
            return Err(FedGraphError::dims(format!(
                "edge vector has length {}, expected {} for {} nodes",
                w.len(),
                n_pairs(n_nodes),
                n_nodes
            )));
        }
        if let Some(i) = w.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(FedGraphError::InvalidParameter(format!(
                "edge weight {i} is {} (must be finite and nonnegative)",
                w[i]
            )));
        }
        Ok(Self { n_nodes, w })
    }

    pub fn empty(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            w: Array1::zeros(n_pairs(n_nodes)),
        }
    }

    pub fn constant(n_nodes: usize, value: f64) -> Result<Self> {
        Self::new(n_nodes, Array1::from_elem(n_pairs(n_nodes), value))
    }

    /// Reads the upper triangle of a dense matrix. The lower triangle and the
    /// diagonal are ignored.
    pub fn from_dense(w: ArrayView2<f64>) -> Result<Self> {
        let (r, c) = w.dim();
        if r != c {
            return Err(FedGraphError::dims(format!("adjacency is {r}x{c}")));
        }
        let half = pairs(r).map(|(_, m, n)| w[[m, n]]).collect::<Array1<_>>();
        Self::new(r, half)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.w.len()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.w.view()
    }

    pub fn into_weights(self) -> Array1<f64> {
        self.w
    }

    pub fn weight(&self, m: usize, n: usize) -> f64 {
        match m.cmp(&n) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.w[pair_index(self.n_nodes, m, n)],
            std::cmp::Ordering::Greater => self.w[pair_index(self.n_nodes, n, m)],
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let k = self.n_nodes;
        let mut out = Array2::zeros((k, k));
        for (e, m, n) in pairs(k) {
            out[[m, n]] = self.w[e];
            out[[n, m]] = self.w[e];
        }
        out
    }

    pub fn degrees(&self) -> Array1<f64> {
        degree_map(self.w.view(), self.n_nodes)
    }
}

/// Nonnegative client weights summing to one (`zeta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientWeights(Array1<f64>);

impl ClientWeights {
    pub fn new(zeta: Array1<f64>) -> Result<Self> {
        if zeta.iter().any(|&z| !(z >= 0.0)) {
            return Err(FedGraphError::InvalidParameter(
                "client weights must be nonnegative".into(),
            ));
        }
        let total: f64 = zeta.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FedGraphError::InvalidParameter(format!(
                "client weights sum to {total}, expected 1"
            )));
        }
        Ok(Self(zeta))
    }

    pub fn uniform(k: usize) -> Self {
        Self(Array1::from_elem(k, 1.0 / k as f64))
    }

    /// `zeta_k = n_k / sum_j n_j`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(FedGraphError::InvalidParameter(
                "all client sample counts are zero".into(),
            ));
        }
        let mut zeta: Array1<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        // push the rounding residue onto the largest weight
        let resid = 1.0 - zeta.sum();
        let imax = zeta
            .iter()
            .enumerate()
            .fold(0, |best, (i, &z)| if z > zeta[best] { i } else { best });
        zeta[imax] += resid;
        Self::new(zeta)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Unnormalised Laplacian `L = D - W`.
pub fn build_laplacian(g: &GraphWeights) -> Array2<f64> {
    let k = g.n_nodes();
    let mut lap = Array2::zeros((k, k));
    for (e, m, n) in pairs(k) {
        let w = g.w[e];
        lap[[m, n]] -= w;
        lap[[n, m]] -= w;
        lap[[m, m]] += w;
        lap[[n, n]] += w;
    }
    lap
}

/// Symmetric normalised Laplacian `D^{-1/2} L D^{-1/2}`.
pub fn normalized_laplacian(g: &GraphWeights) -> Result<Array2<f64>> {
    let inv_sqrt = inv_sqrt_degrees(g)?;
    let mut lap = build_laplacian(g);
    for ((i, j), v) in lap.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    Ok(lap)
}

pub(crate) fn inv_sqrt_degrees(g: &GraphWeights) -> Result<Array1<f64>> {
    let deg = g.degrees();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(FedGraphError::IsolatedNode(i));
    }
    Ok(deg.mapv(|d| 1.0 / d.sqrt()))
}

/// `tr(X^T L X)`.
pub fn quadratic_form(lap: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<f64> {
    let k = x.nrows();
    if lap.dim() != (k, k) {
        return Err(FedGraphError::dims(format!(
            "laplacian is {:?}, signal has {k} rows",
            lap.dim()
        )));
    }
    let lx = lap.dot(&x);
    Ok((&lx * &x).sum().max(0.0))
}

/// Pairwise squared Euclidean distances between rows.
pub fn distance_matrix(x: ArrayView2<f64>) -> Array2<f64> {
    let k = x.nrows();
    let mut out = Array2::zeros((k, k));
    for (_, m, n) in pairs(k) {
        let d = squared_distance(x.row(m), x.row(n));
        out[[m, n]] = d;
        out[[n, m]] = d;
    }
    out
}

/// Upper half of the distance matrix, i.e. `T vec(D(X))` without forming
/// the full matrix.
pub fn pairwise_sq_distances(x: ArrayView2<f64>) -> Array1<f64> {
    let k = x.nrows();
    pairs(k).map(|(_, m, n)| squared_distance(x.row(m), x.row(n))).collect()
}

#[inline]
fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Adjoint of the distance operator: `diag(H 1) + diag(H^T 1) - 2H`.
pub fn distance_adjoint(h: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (r, c) = h.dim();
    if r != c {
        return Err(FedGraphError::dims(format!("expected square matrix, got {r}x{c}")));
    }
    let row_sums = h.sum_axis(Axis(1));
    let col_sums = h.sum_axis(Axis(0));
    let mut out = h.mapv(|v| -2.0 * v);
    for i in 0..r {
        out[[i, i]] += row_sums[i] + col_sums[i];
    }
    Ok(out)
}

/// Column-major vectorisation.
pub fn vec_col_major(a: ArrayView2<f64>) -> Array1<f64> {
    a.t().iter().copied().collect()
}

/// Inverse of [`vec_col_major`] for a square matrix.
pub fn unvec_col_major(v: ArrayView1<f64>) -> Result<Array2<f64>> {
    let k = (v.len() as f64).sqrt().round() as usize;
    if k * k != v.len() {
        return Err(FedGraphError::dims(format!(
            "length {} is not a perfect square",
            v.len()
        )));
    }
    let mut out = Array2::zeros((k, k));
    for n in 0..k {
        for m in 0..k {
            out[[m, n]] = v[n * k + m];
        }
    }
    Ok(out)
}

/// `T vec(A)`: gathers the strictly upper entries of a column-major
/// vectorised `K x K` matrix.
pub fn apply_t(vec_a: ArrayView1<f64>) -> Result<Array1<f64>> {
    let k = (vec_a.len() as f64).sqrt().round() as usize;
    if k * k != vec_a.len() {
        return Err(FedGraphError::dims(format!(
            "length {} is not a perfect square",
            vec_a.len()
        )));
    }
    Ok(pairs(k).map(|(_, m, n)| vec_a[n * k + m]).collect())
}

/// `vec^{-1}(T^T w)`: scatters a half vector into the upper positions of a
/// `K x K` matrix, zeros elsewhere.
pub fn apply_t_adjoint(w: ArrayView1<f64>, k: usize) -> Result<Array2<f64>> {
    if w.len() != n_pairs(k) {
        return Err(FedGraphError::dims(format!(
            "half vector has length {}, expected {}",
            w.len(),
            n_pairs(k)
        )));
    }
    let mut out = Array2::zeros((k, k));
    for (e, m, n) in pairs(k) {
        out[[m, n]] = w[e];
    }
    Ok(out)
}

/// `T^T w` as a column-major vector of length `K^2`.
pub fn apply_t_adjoint_vec(w: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
    Ok(vec_col_major(apply_t_adjoint(w, k)?.view()))
}

/// `B w`: node degrees of the graph with half vector `w`.
pub fn apply_b(w: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
    if w.len() != n_pairs(k) {
        return Err(FedGraphError::dims(format!(
            "half vector has length {}, expected {}",
            w.len(),
            n_pairs(k)
        )));
    }
    Ok(degree_map(w, k))
}

/// `B^T y`: entry `(m, n)` receives `y_m + y_n`.
pub fn apply_b_adjoint(y: ArrayView1<f64>) -> Array1<f64> {
    pairs(y.len()).map(|(_, m, n)| y[m] + y[n]).collect()
}

pub(crate) fn degree_map(w: ArrayView1<f64>, k: usize) -> Array1<f64> {
    let mut deg = Array1::zeros(k);
    for (e, m, n) in pairs(k) {
        deg[m] += w[e];
        deg[n] += w[e];
    }
    deg
}
