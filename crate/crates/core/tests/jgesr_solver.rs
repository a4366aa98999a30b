use fedgraph::aggregate::{aggregate_smooth, AggregationParams};
use fedgraph::graph::{n_pairs, pairs, ClientWeights, GraphWeights};
use fedgraph::jgesr::*;
use fedgraph::FedGraphError;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

fn random_zeta(rng: &mut ChaCha8Rng, k: usize) -> ClientWeights {
    let counts: Vec<usize> = (0..k).map(|_| rng.random_range(5..50)).collect();
    ClientWeights::from_counts(&counts).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, r: usize, c: usize, p_missing: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| if rng.random_bool(p_missing) { 0.0 } else { 1.0 })
}

fn random_w(rng: &mut ChaCha8Rng, k: usize) -> Array1<f64> {
    (0..n_pairs(k)).map(|_| rng.random_range(0.05..1.5)).collect()
}

fn params(alpha: f64) -> JgesrParams {
    JgesrParams {
        alpha,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- objectives

#[test]
fn objective_f_hand_example() {
    let alpha = 0.3;
    let p = JgesrParams {
        mu: 2.0,
        alpha,
        ..Default::default()
    };
    let zeta = ClientWeights::new(array![0.5, 0.5]).unwrap();
    let psi = array![[1.0], [0.0]];
    let x = array![[0.0], [0.0]];
    let m = array![[1.0], [1.0]];
    let f = objective_f(psi.view(), array![0.0].view(), x.view(), m.view(), &zeta, &p).unwrap();
    assert!((f - (0.5 + alpha)).abs() < 1e-15);

    // identical rows, Psi = X~, w = 0
    let psi = array![[0.3, -1.0], [0.3, -1.0], [0.3, -1.0]];
    let f = objective_f(
        psi.view(),
        Array1::zeros(3).view(),
        psi.view(),
        Array2::ones((3, 2)).view(),
        &ClientWeights::uniform(3),
        &p,
    )
    .unwrap();
    assert_eq!(f, 0.0);
}

#[test]
fn objective_f_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let (k, d) = (5, 4);
        let psi = randn(&mut rng, k, d);
        let x = randn(&mut rng, k, d);
        let m = random_mask(&mut rng, k, d, 0.3);
        let zeta = random_zeta(&mut rng, k);
        let w = random_w(&mut rng, k);
        let p = JgesrParams {
            mu: 1.7,
            alpha: 0.4,
            ..Default::default()
        };

        let mut fid = 0.0;
        for i in 0..k {
            for j in 0..d {
                let r = m[[i, j]] * psi[[i, j]] - x[[i, j]];
                fid += zeta.as_array()[i] * r * r;
            }
        }
        let mut sq = 0.0;
        for (e, a, b) in pairs(k) {
            let mut dist = 0.0;
            for j in 0..d {
                dist += (psi[[a, j]] - psi[[b, j]]).powi(2);
            }
            sq += (w[e] + dist).powi(2);
        }
        let expect = 0.5 * p.mu * fid + p.alpha * sq;
        let got = objective_f(psi.view(), w.view(), x.view(), m.view(), &zeta, &p).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.abs());
    }
}

#[test]
fn objective_f_rejects_bad_shapes() {
    let p = params(0.1);
    let psi = Array2::zeros((3, 2));
    let res = objective_f(
        psi.view(),
        Array1::zeros(2).view(),
        psi.view(),
        psi.view(),
        &ClientWeights::uniform(3),
        &p,
    );
    assert!(matches!(res, Err(FedGraphError::DimensionMismatch(_))));
}

#[test]
fn objective_g_cases() {
    let p = JgesrParams {
        beta: 1.0,
        gamma: 1.0,
        ..Default::default()
    };
    assert_eq!(objective_g(array![1.0, -1e-9, 0.5].view(), &p), f64::INFINITY);
    assert!((objective_g(array![1.0].view(), &p) - 1.0).abs() < 1e-15);
    // isolated node
    assert_eq!(objective_g(array![1.0, 0.0, 0.0].view(), &p), f64::INFINITY);

    let p = JgesrParams {
        beta: 0.7,
        gamma: 1.3,
        ..Default::default()
    };
    let c: f64 = 0.45;
    let expect = -3.0 * 0.7 * (2.0 * c).ln() + 3.0 * 1.3 * c;
    assert!((objective_g(array![c, c, c].view(), &p) - expect).abs() < 1e-14);
}

#[test]
fn objective_h_cases() {
    let p = params(1.0);
    let h = objective_h(array![[1.0], [0.0]].view(), array![2.0].view(), &p).unwrap();
    assert!((h - 5.0).abs() < 1e-15);
    let same = Array2::from_elem((4, 3), 0.2);
    assert_eq!(objective_h(same.view(), Array1::zeros(6).view(), &p).unwrap(), 0.0);
}

#[test]
fn dc_split_reproduces_bilinear_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let k = 6;
        let psi = randn(&mut rng, k, 3);
        let w = random_w(&mut rng, k);
        let p = params(0.37);
        let g = GraphWeights::new(k, w.clone()).unwrap();
        let bilinear = p.alpha * (&g.to_dense() * &fedgraph::graph::distance_matrix(psi.view())).sum();
        let u = &w + &fedgraph::graph::pairwise_sq_distances(psi.view());
        let via_dc = p.alpha * u.dot(&u) - objective_h(psi.view(), w.view(), &p).unwrap();
        assert!((bilinear - via_dc).abs() <= 1e-10 * bilinear.abs());
    }
}

// ---------------------------------------------------------------- gradients

fn fd_grad_psi(f: &dyn Fn(&Array2<f64>) -> f64, psi: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut out = Array2::zeros(psi.dim());
    for idx in 0..psi.len() {
        let (i, j) = (idx / psi.ncols(), idx % psi.ncols());
        let mut plus = psi.clone();
        let mut minus = psi.clone();
        plus[[i, j]] += h;
        minus[[i, j]] -= h;
        out[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

fn fd_grad_w(f: &dyn Fn(&Array1<f64>) -> f64, w: &Array1<f64>, h: f64) -> Array1<f64> {
    Array1::from_shape_fn(w.len(), |e| {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus[e] += h;
        minus[e] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

fn rel_err<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = b.mapv(|v| v * v).sum().sqrt().max(1e-12);
    diff / scale
}

#[test]
fn grad_f_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (k, d) = (5, 3);
    for _ in 0..20 {
        let psi = randn(&mut rng, k, d);
        let x = randn(&mut rng, k, d);
        let m = random_mask(&mut rng, k, d, 0.2);
        let zeta = random_zeta(&mut rng, k);
        let w = random_w(&mut rng, k);
        let p = JgesrParams {
            mu: 1.3,
            alpha: 0.2,
            ..Default::default()
        };
        let (g_psi, g_w) = grad_f(psi.view(), w.view(), x.view(), m.view(), &zeta, &p).unwrap();
        let fp = |ps: &Array2<f64>| objective_f(ps.view(), w.view(), x.view(), m.view(), &zeta, &p).unwrap();
        let fw = |ww: &Array1<f64>| objective_f(psi.view(), ww.view(), x.view(), m.view(), &zeta, &p).unwrap();
        assert!(rel_err(&fd_grad_psi(&fp, &psi, 1e-6), &g_psi) <= 1e-5);
        assert!(rel_err(&fd_grad_w(&fw, &w, 1e-6), &g_w) <= 1e-5);
    }
}

#[test]
fn grad_h_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for &k in &[4usize, 5] {
        for _ in 0..20 {
            let psi = randn(&mut rng, k, 3);
            let w = random_w(&mut rng, k);
            let p = params(0.3);
            let (g_psi, g_w) = grad_h(psi.view(), w.view(), &p).unwrap();
            let hp = |ps: &Array2<f64>| objective_h(ps.view(), w.view(), &p).unwrap();
            let hw = |ww: &Array1<f64>| objective_h(psi.view(), ww.view(), &p).unwrap();
            assert!(rel_err(&fd_grad_psi(&hp, &psi, 1e-6), &g_psi) <= 1e-5);
            assert!(rel_err(&fd_grad_w(&hw, &w, 1e-6), &g_w) <= 1e-5);
            assert!(rel_err(&g_w, &(&w * (2.0 * p.alpha))) < 1e-15);
        }
    }
}

#[test]
fn gradients_vanish_where_expected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, d) = (4, 2);
    let x = randn(&mut rng, k, d);
    let ones = Array2::ones((k, d));
    let zeta = random_zeta(&mut rng, k);
    let w = random_w(&mut rng, k);

    // fidelity minimiser with alpha = 0
    let (g_psi, _) = grad_f(x.view(), w.view(), x.view(), ones.view(), &zeta, &params(0.0)).unwrap();
    assert!(g_psi.iter().all(|v| v.abs() < 1e-15));

    // w = -d minimises ||w + d||^2 in w
    let d_half = fedgraph::graph::pairwise_sq_distances(x.view());
    let neg = d_half.mapv(|v| -v);
    let (_, g_w) = grad_f(x.view(), neg.view(), x.view(), ones.view(), &zeta, &params(0.5)).unwrap();
    assert!(g_w.iter().all(|v| v.abs() < 1e-15));

    // identical rows
    let same = Array2::from_elem((k, d), 1.25);
    let (g_psi, _) = grad_h(same.view(), w.view(), &params(0.5)).unwrap();
    assert!(g_psi.iter().all(|v| v.abs() < 1e-15));
}

// ---------------------------------------------------------------- prox

#[test]
fn prox_without_barrier_is_soft_threshold() {
    let p = JgesrParams {
        beta: 0.0,
        gamma: 0.4,
        rho: 2.0,
        ..Default::default()
    };
    // beta = 0 is outside validate(), but the prox itself is well defined
    let v = array![1.0, 0.1, -0.5, 0.3, 0.2, 0.9];
    let out = prox_g(v.view(), &p).unwrap();
    let expect = v.mapv(|x: f64| (x - 0.2).max(0.0));
    assert!(rel_err(&out, &expect) < 1e-15 || (&out - &expect).iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn prox_single_edge_positive_root() {
    for &(beta, gamma, rho, v) in &[(1.0, 1.0, 1.0, 0.3), (0.2, 3.0, 0.5, -2.0), (2.5, 0.1, 4.0, 1.7)] {
        let p = JgesrParams {
            beta,
            gamma,
            rho,
            ..Default::default()
        };
        let out = prox_g(array![v].view(), &p).unwrap();
        let b = gamma - rho * v;
        let root = (-b + (b * b + 8.0 * rho * beta).sqrt()) / (2.0 * rho);
        assert!((out[0] - root).abs() <= 1e-10, "{} vs {root}", out[0]);
    }
}

#[test]
fn prox_beats_random_feasible_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let p = JgesrParams {
        beta: 0.8,
        gamma: 0.6,
        rho: 1.5,
        ..Default::default()
    };
    for _ in 0..3 {
        let v: Array1<f64> = (0..6).map(|_| rng.random_range(-1.0..2.0)).collect();
        let u = prox_g(v.view(), &p).unwrap();
        let best = prox_objective(u.view(), v.view(), &p);
        let mut probes = 0;
        while probes < 10_000 {
            let scale = 10f64.powf(rng.random_range(-6.0..-1.0));
            let cand = Array1::from_shape_fn(6, |e| (u[e] + scale * rng.random_range(-1.0..1.0)).max(0.0));
            let val = prox_objective(cand.view(), v.view(), &p);
            if val.is_finite() {
                assert!(val >= best - 1e-12, "perturbation improved {best} to {val}");
                probes += 1;
            }
        }
    }
}

#[test]
fn prox_fixes_optimal_point() {
    let p = JgesrParams {
        beta: 0.9,
        gamma: 1.2,
        ..Default::default()
    };
    let k = 5;
    let c = 2.0 * p.beta / (p.gamma * (k as f64 - 1.0));
    let v = Array1::from_elem(n_pairs(k), c);
    let out = prox_g(v.view(), &p).unwrap();
    assert!((&out - &v).iter().all(|x| x.abs() < 1e-9));
}

// ---------------------------------------------------------------- PDCA

fn two_cluster_signal(rng: &mut ChaCha8Rng, per: usize, d: usize, noise: f64) -> Array2<f64> {
    let a = randn(rng, 1, d).row(0).to_owned() * 2.0;
    let b = randn(rng, 1, d).row(0).to_owned() * 2.0;
    Array2::from_shape_fn((2 * per, d), |(i, j)| {
        let centre = if i < per { a[j] } else { b[j] };
        {
            let z: f64 = StandardNormal.sample(rng);
            centre + noise * z
        }
    })
}

fn intra_inter(w: &GraphWeights, per: usize) -> (f64, f64) {
    let (mut intra, mut inter) = (0.0, 0.0);
    for (e, m, n) in pairs(w.n_nodes()) {
        if (m < per) == (n < per) {
            intra += w.weights()[e];
        } else {
            inter += w.weights()[e];
        }
    }
    (intra, inter)
}

#[test]
fn pdca_decouples_without_smoothness() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, d) = (6, 4);
    let x = randn(&mut rng, k, d);
    let ones = Array2::ones((k, d));
    let zeta = random_zeta(&mut rng, k);
    let p = JgesrParams {
        alpha: 0.0,
        beta: 0.8,
        gamma: 1.4,
        epsilon: 1e-10,
        max_outer: 2000,
        ..Default::default()
    };
    let w0 = GraphWeights::constant(k, 0.3).unwrap();
    let st = pdca_solve(x.view(), ones.view(), &zeta, &w0, &p).unwrap();
    assert!((&st.psi - &x).iter().all(|v| v.abs() < 1e-14));
    let expect = 2.0 * p.beta / (p.gamma * (k as f64 - 1.0));
    for &w in st.w.weights() {
        assert!((w - expect).abs() < 1e-7, "{w} vs {expect}");
    }
}

#[test]
fn pdca_keeps_noiseless_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let per = 5;
    let x = two_cluster_signal(&mut rng, per, 6, 0.0);
    let k = 2 * per;
    let ones = Array2::ones(x.dim());
    let zeta = ClientWeights::uniform(k);
    let w0 = fedgraph::learn::cosine_similarity_graph(x.view()).graph;
    let st = pdca_solve(x.view(), ones.view(), &zeta, &w0, &JgesrParams::default()).unwrap();
    let rel = (&st.psi - &x).mapv(|v| v * v).sum().sqrt() / x.mapv(|v| v * v).sum().sqrt();
    assert!(rel <= 0.05, "relative change {rel}");
    let (intra, inter) = intra_inter(&st.w, per);
    assert!(intra > 5.0 * inter, "intra {intra} inter {inter}");
}

#[test]
fn pdca_objective_never_increases() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (k, d) = (8, 5);
        let x = randn(&mut rng, k, d) * 0.5;
        let m = random_mask(&mut rng, k, d, 0.1);
        let x = &x * &m;
        let zeta = random_zeta(&mut rng, k);
        let w0 = fedgraph::learn::cosine_similarity_graph(x.view()).graph;
        let st = accept_last_iterate(pdca_solve(x.view(), m.view(), &zeta, &w0, &JgesrParams::default())).unwrap();
        for pair in st.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-7, "seed {seed}: {} -> {}", pair[0], pair[1]);
        }
        assert!(st.w.weights().iter().all(|&v| v >= 0.0));
        assert!(st.w.degrees().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn pdca_fixed_point_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (k, d) = (6, 3);
    let x = randn(&mut rng, k, d);
    let ones = Array2::ones((k, d));
    let zeta = ClientWeights::uniform(k);
    let p = JgesrParams::default();
    let w0 = fedgraph::learn::cosine_similarity_graph(x.view()).graph;
    let st = pdca_solve(x.view(), ones.view(), &zeta, &w0, &p).unwrap();
    // one more step from the returned point, at the same rho
    let (gf_psi, _) = grad_f(st.psi.view(), st.w.weights(), x.view(), ones.view(), &zeta, &p).unwrap();
    let (gh_psi, _) = grad_h(st.psi.view(), st.w.weights(), &p).unwrap();
    let step = (&gf_psi - &gh_psi) / st.rho;
    let moved = step.mapv(|v| v * v).sum().sqrt();
    assert!(moved < 2.0 * p.epsilon, "moved {moved}");
}

#[test]
fn pdca_restoration_matches_smoothing_filter_on_its_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = two_cluster_signal(&mut rng, 4, 5, 0.3);
    let k = x.nrows();
    let ones = Array2::ones(x.dim());
    let zeta = random_zeta(&mut rng, k);
    let p = JgesrParams {
        epsilon: 1e-9,
        max_outer: 20_000,
        ..Default::default()
    };
    let w0 = fedgraph::learn::cosine_similarity_graph(x.view()).graph;
    let st = pdca_solve(x.view(), ones.view(), &zeta, &w0, &p).unwrap();
    // stationarity in Psi: (Z + (4 alpha / mu) L) Psi = Z X
    let ap = AggregationParams {
        mu: p.mu,
        alpha: 2.0 * p.alpha,
    };
    let filtered = aggregate_smooth(x.view(), &st.w, &zeta, &ap).unwrap();
    let gap = (&filtered - &st.psi).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(gap < 1e-5, "gap {gap}");
}

#[test]
fn total_objective_matches_dense_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..100 {
        let (k, d) = (7, 4);
        let psi = randn(&mut rng, k, d);
        let x = randn(&mut rng, k, d);
        let m = random_mask(&mut rng, k, d, 0.2);
        let zeta = random_zeta(&mut rng, k);
        let w = random_w(&mut rng, k);
        let p = JgesrParams {
            mu: 1.1,
            alpha: 0.05,
            beta: 0.9,
            gamma: 1.3,
            ..Default::default()
        };
        let dc = objective_total(psi.view(), w.view(), x.view(), m.view(), &zeta, &p).unwrap();
        let g = GraphWeights::new(k, w).unwrap();
        let dense = joint_objective(psi.view(), &g, x.view(), m.view(), &zeta, &p.weights()).unwrap();
        assert!((dc - dense).abs() <= 1e-9 * dense.abs().max(1.0), "{dc} vs {dense}");
    }
}

#[test]
fn trace_csv_has_one_row_per_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, 4, 2);
    let ones = Array2::ones((4, 2));
    let w0 = GraphWeights::constant(4, 0.5).unwrap();
    let st = pdca_solve(
        x.view(),
        ones.view(),
        &ClientWeights::uniform(4),
        &w0,
        &JgesrParams::default(),
    )
    .unwrap();
    let mut buf = Vec::new();
    st.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), st.iterations + 2);
    assert!(text.starts_with("iteration,objective,delta_psi\n0,"));
}
