//! Server-side aggregation rules: weighted mean, graph smoothing filter,
//! cluster-wise and adjacency-wise averaging, and the alternating two-step
//! baseline.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{FedGraphError, Result};
use crate::graph::{build_laplacian, inv_sqrt_degrees, pairs, ClientWeights, GraphWeights, ParamMatrix};
use crate::jgesr::joint_objective;
use crate::learn::{learn_graph_from_distances, GraphLearnParams};
use crate::linalg::solve_symmetric;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationParams {
    /// Fidelity weight.
    pub mu: f64,
    /// Smoothness weight.
    pub alpha: f64,
}

impl Default for AggregationParams {
    fn default() -> Self {
        Self { mu: 1.0, alpha: 0.05 }
    }
}

impl AggregationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(FedGraphError::InvalidParameter(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(FedGraphError::InvalidParameter(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Cluster label per client, labels `0..n_clusters`, every label used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    assignment: Vec<usize>,
    n_clusters: usize,
}

impl Clustering {
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        let n_clusters = assignment.iter().map(|&c| c + 1).max().unwrap_or(0);
        let mut seen = vec![false; n_clusters];
        for &c in &assignment {
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(FedGraphError::InvalidParameter(format!("cluster label {c} is unused")));
        }
        Ok(Self { assignment, n_clusters })
    }

    /// Connected components of the graph restricted to edges with weight at
    /// least `threshold` (and strictly positive). Labels are assigned in
    /// order of first appearance.
    pub fn from_threshold(g: &GraphWeights, threshold: f64) -> Self {
        let k = g.n_nodes();
        let mut uf = UnionFind::<usize>::new(k);
        for (e, m, n) in pairs(k) {
            let w = g.weights()[e];
            if w > 0.0 && w >= threshold {
                uf.union(m, n);
            }
        }
        let roots = uf.into_labeling();
        let mut relabel = std::collections::HashMap::new();
        let assignment = roots
            .iter()
            .map(|r| {
                let next = relabel.len();
                *relabel.entry(*r).or_insert(next)
            })
            .collect();
        Self::new(assignment).expect("labels are dense by construction")
    }

    /// Thresholds at the mean edge weight.
    pub fn from_graph(g: &GraphWeights) -> Self {
        let tau = g.weights().mean().unwrap_or(0.0);
        Self::from_threshold(g, tau)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }
}

/// Every row becomes `sum_k zeta_k x_k`.
pub fn aggregate_mean(x: ArrayView2<f64>, zeta: &ClientWeights) -> Result<ParamMatrix> {
    if x.nrows() != zeta.len() {
        return Err(FedGraphError::dims(format!(
            "{} rows but {} client weights",
            x.nrows(),
            zeta.len()
        )));
    }
    let mean = zeta.as_array().dot(&x);
    Ok(mean.broadcast(x.dim()).expect("row broadcast").to_owned())
}

/// Graph low-pass filter `(Z + (2 alpha / mu) L)^{-1} Z X`, solved directly.
pub fn aggregate_smooth(
    x: ArrayView2<f64>,
    g: &GraphWeights,
    zeta: &ClientWeights,
    p: &AggregationParams,
) -> Result<ParamMatrix> {
    p.validate()?;
    let k = x.nrows();
    if g.n_nodes() != k || zeta.len() != k {
        return Err(FedGraphError::dims(format!(
            "{k} rows, {} graph nodes, {} client weights",
            g.n_nodes(),
            zeta.len()
        )));
    }
    let z = zeta.as_array();
    let mut a = build_laplacian(g) * (2.0 * p.alpha / p.mu);
    for i in 0..k {
        a[[i, i]] += z[i];
    }
    let zx = &x * &z.view().insert_axis(Axis(1));
    let psi = solve_symmetric(a.view(), zx.view())?;
    check_residual(a.view(), psi.view(), zx.view())?;
    Ok(psi)
}

/// Rejects solutions whose relative residual shows the system was singular.
fn check_residual(a: ArrayView2<f64>, x: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    let r = &a.dot(&x) - &b;
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) * x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if rn > 1e-8 * bn + 1e-12 * scale * (x.len() as f64).sqrt() {
        return Err(FedGraphError::SingularSystem(format!(
            "residual {rn:.3e} relative to right-hand side {bn:.3e}"
        )));
    }
    Ok(())
}

/// Replaces each row by the unweighted mean of its cluster.
pub fn aggregate_clusterwise(x: ArrayView2<f64>, c: &Clustering) -> Result<ParamMatrix> {
    if c.assignment.len() != x.nrows() {
        return Err(FedGraphError::dims(format!(
            "{} rows but {} cluster labels",
            x.nrows(),
            c.assignment.len()
        )));
    }
    let mut sums = Array2::<f64>::zeros((c.n_clusters, x.ncols()));
    let mut counts = vec![0usize; c.n_clusters];
    for (row, &label) in x.rows().into_iter().zip(&c.assignment) {
        let mut acc = sums.row_mut(label);
        acc += &row;
        counts[label] += 1;
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        row /= n as f64;
    }
    let mut out = Array2::zeros(x.dim());
    for (mut row, &label) in out.rows_mut().into_iter().zip(&c.assignment) {
        row.assign(&sums.row(label));
    }
    Ok(out)
}

/// One-hop normalised filter `D^{-1/2} W D^{-1/2} X`.
pub fn aggregate_adjacency(x: ArrayView2<f64>, g: &GraphWeights) -> Result<ParamMatrix> {
    if g.n_nodes() != x.nrows() {
        return Err(FedGraphError::dims(format!(
            "{} rows but {} graph nodes",
            x.nrows(),
            g.n_nodes()
        )));
    }
    let inv = inv_sqrt_degrees(g)?;
    let mut a = g.to_dense();
    for ((i, j), v) in a.indexed_iter_mut() {
        *v *= inv[i] * inv[j];
    }
    Ok(a.dot(&x))
}

/// Minimises `(mu/2) ||M . Psi - X~||_Z^2 + alpha tr(W D(Psi))` over `Psi`
/// for a fixed graph. Columns decouple; column `j` solves
/// `(mu Z diag(M_j) + 4 alpha L) psi_j = mu Z diag(M_j) x~_j`.
pub fn restore_masked(
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    g: &GraphWeights,
    zeta: &ClientWeights,
    p: &AggregationParams,
) -> Result<ParamMatrix> {
    p.validate()?;
    let (k, d) = x_tilde.dim();
    if mask.dim() != (k, d) || g.n_nodes() != k || zeta.len() != k {
        return Err(FedGraphError::dims("restore_masked inputs disagree".to_string()));
    }
    let lap = build_laplacian(g) * (4.0 * p.alpha);
    let z = zeta.as_array();
    let mut out = Array2::zeros((k, d));
    // columns sharing a mask pattern share a system matrix
    let components = Clustering::from_threshold(g, 0.0);
    let mut groups: std::collections::BTreeMap<Vec<bool>, Vec<usize>> = Default::default();
    for j in 0..d {
        let key: Vec<bool> = mask.column(j).iter().map(|&v| v != 0.0).collect();
        groups.entry(key).or_default().push(j);
    }
    for (pattern, cols) in groups {
        let weights = Array1::from_iter((0..k).map(|i| if pattern[i] { p.mu * z[i] } else { 0.0 }));
        // a component with no observation in this column leaves Psi free up
        // to a constant; pin it to the minimum-norm choice, zero
        let mut seen = vec![false; components.n_clusters()];
        for i in 0..k {
            seen[components.assignment[i]] |= weights[i] > 0.0;
        }
        let mut a = lap.clone();
        for i in 0..k {
            a[[i, i]] += if seen[components.assignment[i]] {
                weights[i]
            } else {
                1.0
            };
        }
        let mut rhs = Array2::zeros((k, cols.len()));
        for (c, &j) in cols.iter().enumerate() {
            for i in 0..k {
                rhs[[i, c]] = weights[i] * x_tilde[[i, j]];
            }
        }
        let sol = solve_symmetric(a.view(), rhs.view())?;
        check_residual(a.view(), sol.view(), rhs.view())?;
        for (c, &j) in cols.iter().enumerate() {
            out.column_mut(j).assign(&sol.column(c));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TwoStepOutcome {
    pub psi: ParamMatrix,
    pub graph: GraphWeights,
    /// Joint objective at `(X~, first learned graph)`.
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Alternating baseline: learn a graph from the current estimate, then
/// restore the signal on that graph, `outer_iters` times.
///
/// Both steps decrease the joint objective (fidelity, smoothness, log-degree,
/// sparsity) when `ap.alpha == glp.alpha`.
pub fn aggregate_two_step(
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    glp: &GraphLearnParams,
    ap: &AggregationParams,
    outer_iters: usize,
) -> Result<TwoStepOutcome> {
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(FedGraphError::InvalidParameter("mask must be binary".into()));
    }
    let k = x_tilde.nrows();
    let mut psi = x_tilde.to_owned();
    let mut graph: Option<GraphWeights> = None;
    let mut initial_objective = f64::NAN;
    for it in 0..outer_iters.max(1) {
        let dist = crate::graph::pairwise_sq_distances(psi.view());
        let warm = graph.as_ref().map(|g| g.weights());
        let learned = learn_graph_from_distances(k, dist.view(), warm, glp).or_else(|e| match e {
            // an inexact graph is still a descent step
            FedGraphError::GraphNoConvergence { last, .. } => Ok(crate::learn::LearnedGraph {
                graph: *last,
                objective_trace: Vec::new(),
                iterations: glp.max_iters,
                residual: f64::NAN,
            }),
            other => Err(other),
        })?;
        let g = learned.graph;
        if it == 0 {
            initial_objective = objective(&psi, x_tilde, mask, zeta, &g, glp, ap)?;
        }
        if outer_iters == 0 {
            graph = Some(g);
            break;
        }
        psi = restore_masked(x_tilde, mask, &g, zeta, ap)?;
        graph = Some(g);
    }
    let graph = graph.expect("at least one outer iteration");
    let final_objective = objective(&psi, x_tilde, mask, zeta, &graph, glp, ap)?;
    Ok(TwoStepOutcome {
        psi,
        graph,
        initial_objective,
        final_objective,
    })
}

fn objective(
    psi: &Array2<f64>,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    g: &GraphWeights,
    glp: &GraphLearnParams,
    ap: &AggregationParams,
) -> Result<f64> {
    joint_objective(
        psi.view(),
        g,
        x_tilde,
        mask,
        zeta,
        &crate::jgesr::ObjectiveWeights {
            mu: ap.mu,
            alpha: ap.alpha,
            beta: glp.beta,
            gamma: glp.gamma,
        },
    )
}
