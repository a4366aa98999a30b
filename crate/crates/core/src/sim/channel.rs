//! Lossy uplink: binary masks plus additive Gaussian noise.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stream_rng;
use crate::error::{FedGraphError, Result};
use crate::graph::ParamMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub missing_rate: f64,
    pub noise_scale: f64,
    /// Noise standard deviation of each client.
    pub sigma: Vec<f64>,
}

impl ChannelSpec {
    /// `sigma_k = noise_scale * mean(|psi0|)` for every client.
    pub fn from_initial(missing_rate: f64, noise_scale: f64, psi0: ArrayView1<f64>, k: usize) -> Result<Self> {
        let level = if psi0.is_empty() {
            0.0
        } else {
            psi0.mapv(f64::abs).mean().unwrap_or(0.0)
        };
        let spec = Self {
            missing_rate,
            noise_scale,
            sigma: vec![noise_scale * level; k],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(FedGraphError::InvalidParameter(format!(
                "missing_rate must lie in [0, 1], got {}",
                self.missing_rate
            )));
        }
        if !(self.noise_scale >= 0.0) || self.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(FedGraphError::InvalidParameter(
                "noise levels must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One realisation of the channel, independent of the transmitted values.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub mask: ParamMatrix,
    pub noise: ParamMatrix,
}

impl ChannelDraw {
    pub fn sample(k: usize, d: usize, spec: &ChannelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if spec.sigma.len() != k {
            return Err(FedGraphError::dims(format!(
                "{} noise levels for {k} clients",
                spec.sigma.len()
            )));
        }
        let mask = Array2::from_shape_fn((k, d), |_| {
            if rng.random::<f64>() < spec.missing_rate {
                0.0
            } else {
                1.0
            }
        });
        let noise = Array2::from_shape_fn((k, d), |(i, _)| {
            let z: f64 = StandardNormal.sample(rng);
            spec.sigma[i] * z
        });
        Ok(Self { mask, noise })
    }

    /// `X~ = M . X + N`.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<ParamMatrix> {
        if x.dim() != self.mask.dim() {
            return Err(FedGraphError::dims(format!(
                "signal {:?}, channel {:?}",
                x.dim(),
                self.mask.dim()
            )));
        }
        Ok(&(&x * &self.mask) + &self.noise)
    }

    /// Hex SHA-256 of the mask and noise bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mask.iter().chain(self.noise.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Degrades `x` with a fresh draw seeded by `seed`; returns `(X~, M)`.
pub fn apply_channel(x: ArrayView2<f64>, spec: &ChannelSpec, seed: u64) -> Result<(ParamMatrix, ParamMatrix)> {
    let (k, d) = x.dim();
    let draw = ChannelDraw::sample(k, d, spec, &mut stream_rng(seed, "channel", 0, 0))?;
    let xt = draw.apply(x)?;
    Ok((xt, draw.mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn clean_channel_is_identity() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let spec = ChannelSpec {
            missing_rate: 0.0,
            noise_scale: 0.0,
            sigma: vec![0.0; 3],
        };
        let (xt, m) = apply_channel(x.view(), &spec, 5).unwrap();
        assert_eq!(xt, x);
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn total_loss_leaves_only_noise() {
        let x = Array2::from_elem((4, 5), 7.0);
        let spec = ChannelSpec {
            missing_rate: 1.0,
            noise_scale: 1.0,
            sigma: vec![0.3; 4],
        };
        let (xt, m) = apply_channel(x.view(), &spec, 1).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        let draw = ChannelDraw::sample(4, 5, &spec, &mut stream_rng(1, "channel", 0, 0)).unwrap();
        assert_eq!(xt, draw.noise);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let (k, d) = (10, 10_000);
        let x = Array2::from_elem((k, d), 3.0);
        let spec = ChannelSpec {
            missing_rate: 0.2,
            noise_scale: 1.0,
            sigma: vec![0.5; k],
        };
        let (xt, m) = apply_channel(x.view(), &spec, 9).unwrap();
        let resid = &xt - &(&x * &m);
        let n = resid.len() as f64;
        let mean = resid.sum() / n;
        let var = resid.mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1.0);
        assert!((var / 0.25 - 1.0).abs() < 0.02, "variance {var}");
        let missing = m.iter().filter(|&&v| v == 0.0).count() as f64 / n;
        assert!((missing - 0.2).abs() < 0.01);
    }

    #[test]
    fn sigma_follows_initial_magnitude() {
        let psi0 = Array1::from(vec![1.0, -3.0, 2.0, 0.0]);
        let spec = ChannelSpec::from_initial(0.0, 0.2, psi0.view(), 3).unwrap();
        assert_eq!(spec.sigma, vec![0.2 * 1.5; 3]);
        assert!(ChannelSpec::from_initial(1.5, 0.2, psi0.view(), 3).is_err());
    }

    #[test]
    fn digest_changes_with_draw() {
        let spec = ChannelSpec {
            missing_rate: 0.1,
            noise_scale: 1.0,
            sigma: vec![1.0; 2],
        };
        let a = ChannelDraw::sample(2, 3, &spec, &mut stream_rng(0, "c", 0, 0)).unwrap();
        let b = ChannelDraw::sample(2, 3, &spec, &mut stream_rng(0, "c", 1, 0)).unwrap();
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
