//! Multinomial linear classifier and proximal local SGD.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Softmax regression with `theta = [W (row-major, features x classes), b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxModel {
    pub n_features: usize,
    pub n_classes: usize,
}

impl SoftmaxModel {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        Self { n_features, n_classes }
    }

    /// Parameter count `p Q + Q`.
    pub fn dim(&self) -> usize {
        self.n_features * self.n_classes + self.n_classes
    }

    fn split<'a>(&self, theta: ArrayView1<'a, f64>) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let pq = self.n_features * self.n_classes;
        let w = theta
            .slice_move(s![..pq])
            .into_shape_with_order((self.n_features, self.n_classes))
            .expect("contiguous parameter block");
        (w, theta.slice_move(s![pq..]))
    }

    fn logits(&self, theta: ArrayView1<f64>, x: ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.split(theta);
        x.dot(&w) + b
    }

    /// Row-wise softmax probabilities and per-sample log-likelihoods of `y`.
    fn probabilities(&self, theta: ArrayView1<f64>, x: ArrayView2<f64>, y: &[usize]) -> (Array2<f64>, Vec<f64>) {
        let mut z = self.logits(theta, x);
        let mut loglik = Vec::with_capacity(y.len());
        for (mut row, &label) in z.rows_mut().into_iter().zip(y) {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - top).exp());
            let total = row.sum();
            loglik.push((row[label] / total).ln());
            row /= total;
        }
        (z, loglik)
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, theta: ArrayView1<f64>, x: ArrayView2<f64>, y: &[usize]) -> (f64, Array1<f64>) {
        let n = y.len();
        assert!(n > 0, "loss on an empty batch");
        let (mut p, loglik) = self.probabilities(theta, x, y);
        let loss = -loglik.iter().sum::<f64>() / n as f64;
        for (i, &label) in y.iter().enumerate() {
            p[[i, label]] -= 1.0;
        }
        p /= n as f64;
        let gw = x.t().dot(&p);
        let gb = p.sum_axis(Axis(0));
        let mut grad = Array1::zeros(self.dim());
        let pq = self.n_features * self.n_classes;
        grad.slice_mut(s![..pq]).assign(&Array1::from_iter(gw.iter().cloned()));
        grad.slice_mut(s![pq..]).assign(&gb);
        (loss, grad)
    }

    pub fn predict(&self, theta: ArrayView1<f64>, x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(theta, x)
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    )
                    .0
            })
            .collect()
    }

    /// `(accuracy, mean loss)`; both NaN on an empty set.
    pub fn evaluate(&self, theta: ArrayView1<f64>, x: ArrayView2<f64>, y: &[usize]) -> (f64, f64) {
        if y.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let pred = self.predict(theta, x);
        let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        let (_, loglik) = self.probabilities(theta, x, y);
        (
            hits as f64 / y.len() as f64,
            -loglik.iter().sum::<f64>() / y.len() as f64,
        )
    }
}

/// Local proximal SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub eta: f64,
    /// Weight of the pull `(mu/2) ||x - x_global||^2`.
    pub mu: f64,
    pub batch_size: usize,
}

/// `epochs` passes of minibatch SGD on `f_k(x) + (mu/2) ||x - x_global||^2`
/// from `x_global`, reshuffling every epoch.
pub fn local_update(
    model: &SoftmaxModel,
    x_global: ArrayView1<f64>,
    x: ArrayView2<f64>,
    y: &[usize],
    cfg: &LocalTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Array1<f64> {
    let mut theta = x_global.to_owned();
    let n = y.len();
    if n == 0 {
        return theta;
    }
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (_, g) = model.loss_and_grad(theta.view(), xb.view(), &yb);
            let pull = (&theta - &x_global) * cfg.mu;
            theta.scaled_add(-cfg.eta, &(g + pull));
        }
    }
    theta
}
