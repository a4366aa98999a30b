//! Graph learning from smooth signals and the cosine-similarity warm start.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{FedGraphError, Result};
use crate::graph::{degree_map, n_pairs, pairs, pairwise_sq_distances, GraphWeights};
use crate::logdeg::{natural_residual, LogDegreeProblem};

/// Weights of the smoothness / log-degree / sparsity objective
/// `2 alpha w^T d - beta 1^T log(B w) + gamma 1^T w` over `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphLearnParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GraphLearnParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            gamma: 1.0,
            max_iters: 5000,
            tol: 1e-8,
        }
    }
}

impl GraphLearnParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FedGraphError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.max_iters == 0 {
            return Err(FedGraphError::InvalidParameter("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Full record of a graph-learning solve.
#[derive(Debug, Clone)]
pub struct LearnedGraph {
    pub graph: GraphWeights,
    /// Objective after each proximal-point step; the first entry is the start.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Objective value in half-vector form, `+inf` outside the domain.
pub fn graph_learning_objective(dist: ArrayView1<f64>, w: ArrayView1<f64>, p: &GraphLearnParams) -> f64 {
    let k = nodes_for_pairs(w.len());
    if w.iter().any(|&v| v < 0.0) {
        return f64::INFINITY;
    }
    let deg = degree_map(w, k);
    if deg.iter().any(|&d| !(d > 0.0)) {
        return f64::INFINITY;
    }
    2.0 * p.alpha * w.dot(&dist) - p.beta * deg.mapv(f64::ln).sum() + p.gamma * w.sum()
}

pub(crate) fn nodes_for_pairs(m: usize) -> usize {
    // solve k (k - 1) / 2 = m
    let k = ((1.0 + (1.0 + 8.0 * m as f64).sqrt()) / 2.0).round() as usize;
    debug_assert_eq!(n_pairs(k), m);
    k
}

/// Learns a graph from the rows of `x`. See [`learn_graph_traced`].
pub fn learn_graph(x: ArrayView2<f64>, p: &GraphLearnParams) -> Result<GraphWeights> {
    learn_graph_traced(x, p).map(|out| out.graph)
}

/// Learns edge weights over the rows of `x` by proximal-point iterations on
/// the convex graph-learning objective.
///
/// The smooth part is linear in `w`, so each proximal step is an exact
/// forward-backward step and the objective is non-increasing along the
/// iterates. Step lengths double every iteration up to a cap.
pub fn learn_graph_traced(x: ArrayView2<f64>, p: &GraphLearnParams) -> Result<LearnedGraph> {
    p.validate()?;
    let k = x.nrows();
    if k < 2 {
        return Err(FedGraphError::InvalidParameter(format!(
            "need at least 2 nodes, got {k}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FedGraphError::InvalidParameter(
            "signal contains non-finite entries".into(),
        ));
    }
    let dist = pairwise_sq_distances(x);
    learn_graph_from_distances(k, dist.view(), None, p)
}

const STEP_INIT: f64 = 1.0;
const STEP_MAX: f64 = 1e6;

pub(crate) fn learn_graph_from_distances(
    k: usize,
    dist: ArrayView1<f64>,
    warm_start: Option<ArrayView1<f64>>,
    p: &GraphLearnParams,
) -> Result<LearnedGraph> {
    let linear: Array1<f64> = dist.mapv(|d| 2.0 * p.alpha * d + p.gamma);
    let mut w = match warm_start {
        Some(w0) if w0.iter().all(|&v| v >= 0.0) && degree_map(w0, k).iter().all(|&d| d > 0.0) => w0.to_owned(),
        _ => Array1::from_elem(n_pairs(k), 2.0 * p.beta / (p.gamma * (k as f64 - 1.0))),
    };
    let mut trace = vec![graph_learning_objective(dist, w.view(), p)];
    let mut step = STEP_INIT;
    let mut residual = outer_residual(k, &linear, w.view(), p.beta);

    for it in 0..p.max_iters {
        if residual <= p.tol {
            return Ok(LearnedGraph {
                graph: GraphWeights::new(k, w)?,
                objective_trace: trace,
                iterations: it,
                residual,
            });
        }
        let problem = LogDegreeProblem {
            k,
            linear: linear.view(),
            anchor: w.view(),
            rho: 1.0 / step,
            beta: p.beta,
        };
        let sol = problem.solve(Some(w.view()), 0.1 * p.tol, 200)?;
        let f_new = graph_learning_objective(dist, sol.w.view(), p);
        // inexact inner solves are only accepted when they do not increase
        // the objective; otherwise shrink the step and retry
        if f_new > *trace.last().unwrap() + 1e-12 * (1.0 + f_new.abs()) {
            step = (step * 0.25).max(1e-6);
            continue;
        }
        w = sol.w;
        trace.push(f_new);
        residual = outer_residual(k, &linear, w.view(), p.beta);
        step = (step * 2.0).min(STEP_MAX);
    }

    if residual <= p.tol {
        return Ok(LearnedGraph {
            graph: GraphWeights::new(k, w)?,
            objective_trace: trace,
            iterations: p.max_iters,
            residual,
        });
    }
    Err(FedGraphError::GraphNoConvergence {
        iterations: p.max_iters,
        residual,
        last: Box::new(GraphWeights::new(k, w)?),
    })
}

fn outer_residual(k: usize, linear: &Array1<f64>, w: ArrayView1<f64>, beta: f64) -> f64 {
    let deg = degree_map(w, k);
    let inv = deg.mapv(|d| 1.0 / d);
    let g = Array1::from_iter(pairs(k).map(|(e, a, b)| linear[e] - beta * (inv[a] + inv[b])));
    natural_residual(w, g.view())
}

/// Cosine-similarity graph plus the rows that had zero norm.
#[derive(Debug, Clone)]
pub struct CosineGraph {
    pub graph: GraphWeights,
    /// Nodes whose rows were all zero; their edges are set to 0.
    pub zero_rows: Vec<usize>,
}

/// `w_mn = max(0, cos(x_m, x_n))`.
///
/// Zero rows do not abort: their edges get weight 0 and the row index is
/// reported in [`CosineGraph::zero_rows`]. Use [`CosineGraph::strict`] to turn
/// that into an error.
pub fn cosine_similarity_graph(x: ArrayView2<f64>) -> CosineGraph {
    let k = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let zero_rows: Vec<usize> = (0..k).filter(|&i| !(norms[i] > 0.0)).collect();
    for &i in &zero_rows {
        log::warn!("cosine graph: row {i} has zero norm, its edges are set to 0");
    }
    let w = pairs(k)
        .map(|(_, m, n)| {
            if norms[m] > 0.0 && norms[n] > 0.0 {
                (x.row(m).dot(&x.row(n)) / (norms[m] * norms[n])).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    CosineGraph {
        graph: GraphWeights::new(k, w).expect("cosine weights are in [0, 1]"),
        zero_rows,
    }
}

impl CosineGraph {
    pub fn strict(self) -> Result<GraphWeights> {
        match self.zero_rows.first() {
            Some(&i) => Err(FedGraphError::ZeroRow(i)),
            None => Ok(self.graph),
        }
    }
}
