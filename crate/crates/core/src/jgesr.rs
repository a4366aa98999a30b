//! Joint graph estimation and signal restoration.
//!
//! The joint problem over restored parameters `Psi` and edge weights `w`
//!
//! ```text
//! (mu/2) ||M . Psi - X~||_Z^2 + alpha tr(W D(Psi)) - beta 1^T log(B w) + gamma ||w||_1,  w >= 0
//! ```
//!
//! is biconvex through `tr(W D(Psi)) = 2 w^T d(Psi)` with `d = T vec(D(Psi))`.
//! Writing `2 w^T d = ||w + d||^2 - ||w||^2 - ||d||^2` splits it as `f + g - h`:
//!
//! * `f = (mu/2) ||M . Psi - X~||_Z^2 + alpha ||w + d||^2` (smooth, convex)
//! * `g = -beta 1^T log(B w) + gamma ||w||_1 + indicator(w >= 0)` (prox-friendly)
//! * `h = alpha (||w||^2 + ||d||^2)` (smooth, convex)
//!
//! and [`pdca_solve`] runs the proximal DC iteration on it. Gradients are the
//! exact derivatives of these functions, factors of two included.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FedGraphError, Result};
use crate::graph::{
    apply_t, apply_t_adjoint, build_laplacian, degree_map, distance_adjoint, distance_matrix, pairwise_sq_distances,
    vec_col_major, ClientWeights, GraphWeights, ParamMatrix,
};
use crate::learn::nodes_for_pairs;
use crate::logdeg::LogDegreeProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JgesrParams {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Proximal parameter; the step length is `1 / rho`.
    pub rho: f64,
    /// Outer stopping tolerance on the iterate change.
    pub epsilon: f64,
    pub max_outer: usize,
    pub prox_tol: f64,
    pub prox_max_iters: usize,
}

impl Default for JgesrParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            alpha: 0.05,
            beta: 1.0,
            gamma: 1.0,
            rho: 1.0,
            epsilon: 1e-3,
            max_outer: 500,
            prox_tol: 1e-8,
            prox_max_iters: 1000,
        }
    }
}

impl JgesrParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("mu", self.mu),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("epsilon", self.epsilon),
            ("prox_tol", self.prox_tol),
        ];
        for (name, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FedGraphError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(FedGraphError::InvalidParameter(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if self.max_outer == 0 || self.prox_max_iters == 0 {
            return Err(FedGraphError::InvalidParameter(
                "iteration caps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            mu: self.mu,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

/// The four scalar weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JgesrState {
    pub psi: ParamMatrix,
    pub w: GraphWeights,
    /// `f + g - h` at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// `||Psi^{t+1} - Psi^t||_F` per step.
    pub psi_steps: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Proximal parameter in force at the end (never below the configured one).
    pub rho: f64,
}

impl JgesrState {
    /// Writes `iteration,objective,delta_psi` rows.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,objective,delta_psi")?;
        writeln!(out, "0,{:.17e},", self.objective_trace[0])?;
        for (t, (f, dp)) in self.objective_trace[1..].iter().zip(&self.psi_steps).enumerate() {
            writeln!(out, "{},{:.17e},{:.17e}", t + 1, f, dp)?;
        }
        Ok(())
    }
}

fn check_dims(
    psi: ArrayView2<f64>,
    w: ArrayView1<f64>,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
) -> Result<()> {
    let k = psi.nrows();
    if x_tilde.dim() != psi.dim() || mask.dim() != psi.dim() {
        return Err(FedGraphError::dims(format!(
            "psi {:?}, x_tilde {:?}, mask {:?}",
            psi.dim(),
            x_tilde.dim(),
            mask.dim()
        )));
    }
    check_graph_dims(psi, w)?;
    if zeta.len() != k {
        return Err(FedGraphError::dims(format!(
            "{k} rows but {} client weights",
            zeta.len()
        )));
    }
    Ok(())
}

fn check_graph_dims(psi: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<()> {
    let k = psi.nrows();
    if w.len() != crate::graph::n_pairs(k) {
        return Err(FedGraphError::dims(format!("{} edge weights for {k} nodes", w.len())));
    }
    Ok(())
}

/// `M . Psi - X~`
fn fidelity_residual(psi: ArrayView2<f64>, x_tilde: ArrayView2<f64>, mask: ArrayView2<f64>) -> Array2<f64> {
    &(&mask * &psi) - &x_tilde
}

/// `(mu/2) tr(R^T Z R)` with `R = M . Psi - X~`.
fn fidelity(r: &Array2<f64>, zeta: &ClientWeights, mu: f64) -> f64 {
    let row_sq = (r * r).sum_axis(Axis(1));
    0.5 * mu * zeta.as_array().dot(&row_sq)
}

/// `f(Psi, w) = (mu/2) ||M . Psi - X~||_Z^2 + alpha ||w + T vec(D(Psi))||^2`.
pub fn objective_f(
    psi: ArrayView2<f64>,
    w: ArrayView1<f64>,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    p: &JgesrParams,
) -> Result<f64> {
    check_dims(psi, w, x_tilde, mask, zeta)?;
    let r = fidelity_residual(psi, x_tilde, mask);
    let u = &w + &pairwise_sq_distances(psi);
    Ok(fidelity(&r, zeta, p.mu) + p.alpha * u.dot(&u))
}

/// `g(w) = -beta 1^T log(B w) + gamma ||w||_1`, `+inf` unless `w >= 0` and `B w > 0`.
pub fn objective_g(w: ArrayView1<f64>, p: &JgesrParams) -> f64 {
    if w.iter().any(|&v| !(v >= 0.0)) {
        return f64::INFINITY;
    }
    let k = nodes_for_pairs(w.len());
    let deg = degree_map(w, k);
    if deg.iter().any(|&d| !(d > 0.0)) {
        return f64::INFINITY;
    }
    -p.beta * deg.mapv(f64::ln).sum() + p.gamma * w.sum()
}

/// `h(Psi, w) = alpha (||w||^2 + ||T vec(D(Psi))||^2)`.
pub fn objective_h(psi: ArrayView2<f64>, w: ArrayView1<f64>, p: &JgesrParams) -> Result<f64> {
    check_graph_dims(psi, w)?;
    let d = pairwise_sq_distances(psi);
    Ok(p.alpha * (w.dot(&w) + d.dot(&d)))
}

/// `f + g - h`.
pub fn objective_total(
    psi: ArrayView2<f64>,
    w: ArrayView1<f64>,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    p: &JgesrParams,
) -> Result<f64> {
    let g = objective_g(w, p);
    if !g.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(objective_f(psi, w, x_tilde, mask, zeta, p)? + g - objective_h(psi, w, p)?)
}

/// `f + g - h` with the cancelling distance terms removed analytically:
/// fidelity `+ 2 alpha w^T d + g`. Used inside the solver.
fn objective_reduced(
    psi: ArrayView2<f64>,
    w: ArrayView1<f64>,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    p: &JgesrParams,
) -> f64 {
    let g = objective_g(w, p);
    if !g.is_finite() {
        return f64::INFINITY;
    }
    let r = fidelity_residual(psi, x_tilde, mask);
    fidelity(&r, zeta, p.mu) + 2.0 * p.alpha * w.dot(&pairwise_sq_distances(psi)) + g
}

/// The joint objective evaluated directly with the dense adjacency matrix.
/// The sparsity term counts every undirected edge once.
pub fn joint_objective(
    psi: ArrayView2<f64>,
    g: &GraphWeights,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    weights: &ObjectiveWeights,
) -> Result<f64> {
    check_dims(psi, g.weights(), x_tilde, mask, zeta)?;
    let w = g.to_dense();
    let r = fidelity_residual(psi, x_tilde, mask);
    let smooth = (&w * &distance_matrix(psi)).sum();
    let deg = w.sum_axis(Axis(1));
    if deg.iter().any(|&d| !(d > 0.0)) {
        return Ok(f64::INFINITY);
    }
    let log_deg: f64 = deg.mapv(f64::ln).sum();
    let l1 = 0.5 * w.mapv(f64::abs).sum();
    Ok(fidelity(&r, zeta, weights.mu) + weights.alpha * smooth - weights.beta * log_deg + weights.gamma * l1)
}

/// `grad_Psi` of `alpha ||c||^2` where `c = a + T vec(D(Psi))`, through the
/// distance adjoint: `2 alpha (D*(H) + D*(H)^T) Psi` with `H = vec^{-1}(T^T c)`.
fn distance_term_gradient(psi: ArrayView2<f64>, c: ArrayView1<f64>, alpha: f64) -> Result<Array2<f64>> {
    let k = psi.nrows();
    let h = apply_t_adjoint(c, k)?;
    let a = distance_adjoint(h.view())?;
    let sym = &a + &a.t();
    Ok(sym.dot(&psi) * (2.0 * alpha))
}

/// Exact gradient of [`objective_f`] with respect to `(Psi, w)`.
pub fn grad_f(
    psi: ArrayView2<f64>,
    w: ArrayView1<f64>,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    p: &JgesrParams,
) -> Result<(Array2<f64>, Array1<f64>)> {
    check_dims(psi, w, x_tilde, mask, zeta)?;
    let r = fidelity_residual(psi, x_tilde, mask);
    let d = apply_t(vec_col_major(distance_matrix(psi).view()).view())?;
    let u = &w + &d;
    let g_psi = fidelity_gradient(&r, mask, zeta, p.mu) + distance_term_gradient(psi, u.view(), p.alpha)?;
    Ok((g_psi, u * (2.0 * p.alpha)))
}

/// Exact gradient of [`objective_h`].
pub fn grad_h(psi: ArrayView2<f64>, w: ArrayView1<f64>, p: &JgesrParams) -> Result<(Array2<f64>, Array1<f64>)> {
    check_graph_dims(psi, w)?;
    let d = apply_t(vec_col_major(distance_matrix(psi).view()).view())?;
    let g_psi = distance_term_gradient(psi, d.view(), p.alpha)?;
    Ok((g_psi, w.to_owned() * (2.0 * p.alpha)))
}

/// `mu M . (Z R)`
fn fidelity_gradient(r: &Array2<f64>, mask: ArrayView2<f64>, zeta: &ClientWeights, mu: f64) -> Array2<f64> {
    let z = zeta.as_array().view().insert_axis(Axis(1));
    &(&mask * &(r * &z)) * mu
}

/// `grad f - grad h` in closed form: the distance terms cancel down to
/// `4 alpha L(w) Psi` and `2 alpha d`.
fn dc_gradient(
    psi: ArrayView2<f64>,
    w: &GraphWeights,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    p: &JgesrParams,
) -> (Array2<f64>, Array1<f64>) {
    let r = fidelity_residual(psi, x_tilde, mask);
    let lap = build_laplacian(w);
    let g_psi = fidelity_gradient(&r, mask, zeta, p.mu) + lap.dot(&psi) * (4.0 * p.alpha);
    let g_w = pairwise_sq_distances(psi) * (2.0 * p.alpha);
    (g_psi, g_w)
}

/// `argmin_u g(u) + (rho/2) ||u - v||^2` with `rho = p.rho`.
pub fn prox_g(v: ArrayView1<f64>, p: &JgesrParams) -> Result<Array1<f64>> {
    prox_g_with(v, None, p.rho, p)
}

fn prox_g_with(v: ArrayView1<f64>, warm: Option<ArrayView1<f64>>, rho: f64, p: &JgesrParams) -> Result<Array1<f64>> {
    let k = nodes_for_pairs(v.len());
    let linear = Array1::from_elem(v.len(), p.gamma);
    let problem = LogDegreeProblem {
        k,
        linear: linear.view(),
        anchor: v,
        rho,
        beta: p.beta,
    };
    let sol = problem.solve(warm, p.prox_tol, p.prox_max_iters)?;
    if !sol.converged {
        return Err(FedGraphError::NoConvergence {
            iterations: sol.iterations,
            residual: sol.residual,
        });
    }
    Ok(sol.w)
}

/// Value of the prox subproblem objective, exposed for optimality checks.
pub fn prox_objective(u: ArrayView1<f64>, v: ArrayView1<f64>, p: &JgesrParams) -> f64 {
    let g = objective_g(u, p);
    let diff = &u - &v;
    g + 0.5 * p.rho * diff.dot(&diff)
}

const MAX_RHO_DOUBLINGS: usize = 40;

/// Proximal DC iteration starting from `Psi = X~` and `w0`.
///
/// Each step is `Psi <- Psi - (grad_Psi f - grad_Psi h) / rho` and
/// `w <- prox_{g/rho}(w - (grad_w f - grad_w h) / rho)`. If a step would
/// increase `f + g - h`, `rho` is doubled and the step recomputed, so the
/// returned trace is non-increasing. Stops once both `||dPsi||_F` and
/// `||dw||_2` fall below `epsilon`.
pub fn pdca_solve(
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    w0: &GraphWeights,
    p: &JgesrParams,
) -> Result<JgesrState> {
    p.validate()?;
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(FedGraphError::InvalidParameter("mask must be binary".into()));
    }
    check_dims(x_tilde, w0.weights(), x_tilde, mask, zeta)?;

    let mut w = repair_initial_graph(w0);
    let mut psi = x_tilde.to_owned();
    let mut fval = objective_reduced(psi.view(), w.weights(), x_tilde, mask, zeta, p);
    let mut state = JgesrState {
        psi: psi.clone(),
        w: w.clone(),
        objective_trace: vec![fval],
        psi_steps: Vec::new(),
        iterations: 0,
        converged: false,
        rho: p.rho,
    };
    let mut rho = p.rho;
    let mut last_step = f64::INFINITY;

    for t in 0..p.max_outer {
        let (g_psi, g_w) = dc_gradient(psi.view(), &w, x_tilde, mask, zeta, p);
        let mut accepted = None;
        for _ in 0..MAX_RHO_DOUBLINGS {
            let psi_new = &psi - &(&g_psi / rho);
            let v = &w.weights() - &(&g_w / rho);
            let w_new = prox_g_with(v.view(), Some(w.weights()), rho, p)?;
            let f_new = objective_reduced(psi_new.view(), w_new.view(), x_tilde, mask, zeta, p);
            if f_new <= fval + 1e-12 * (1.0 + fval.abs()) {
                accepted = Some((psi_new, w_new, f_new));
                break;
            }
            rho *= 2.0;
        }
        let Some((psi_new, w_new, f_new)) = accepted else {
            state.psi = psi;
            state.w = w;
            state.rho = rho;
            return Err(FedGraphError::SolverNoConvergence {
                iterations: t,
                residual: last_step,
                state: Box::new(state),
            });
        };

        let d_psi = (&psi_new - &psi).mapv(|v| v * v).sum().sqrt();
        let d_w = (&w_new - &w.weights()).mapv(|v| v * v).sum().sqrt();
        last_step = d_psi.max(d_w);
        psi = psi_new;
        w = GraphWeights::new(w.n_nodes(), w_new)?;
        fval = f_new;

        state.objective_trace.push(fval);
        state.psi_steps.push(d_psi);
        state.iterations = t + 1;
        if last_step < p.epsilon {
            state.converged = true;
            break;
        }
    }

    state.psi = psi;
    state.w = w;
    state.rho = rho;
    if state.converged {
        Ok(state)
    } else {
        Err(FedGraphError::SolverNoConvergence {
            iterations: state.iterations,
            residual: last_step,
            state: Box::new(state),
        })
    }
}

/// Adds `1e-6` to every edge when some node has zero degree.
fn repair_initial_graph(w0: &GraphWeights) -> GraphWeights {
    if w0.degrees().iter().all(|&d| d > 0.0) {
        return w0.clone();
    }
    log::debug!("initial graph has an isolated node; shifting all edges by 1e-6");
    GraphWeights::new(w0.n_nodes(), w0.weights().mapv(|v| v + 1e-6)).expect("shifted weights stay nonnegative")
}

/// Unwraps a non-converged solve into its last state.
pub fn accept_last_iterate(res: Result<JgesrState>) -> Result<JgesrState> {
    match res {
        Err(FedGraphError::SolverNoConvergence { state, .. }) => Ok(*state),
        other => other,
    }
}
