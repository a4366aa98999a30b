//! Datasets, Dirichlet partitioning, the clustered synthetic benchmark and an
//! IDX (MNIST) reader.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::error::{FedGraphError, Result};

/// Fraction of each client's samples used for local training.
pub const TRAIN_FRACTION: f64 = 0.75;

/// A labelled sample matrix; labels are `0..n_classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FedGraphError::dims(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(FedGraphError::InvalidParameter(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One client's data with its fixed train/test split (row indices).
#[derive(Debug, Clone)]
pub struct LocalDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_set(&self) -> (Array2<f64>, Vec<usize>) {
        self.select(&self.train)
    }

    pub fn test_set(&self) -> (Array2<f64>, Vec<usize>) {
        self.select(&self.test)
    }

    fn select(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// One draw from `Dir_k(kappa)`.
///
/// Gamma variates are formed in log space (`Gamma(a) = Gamma(a + 1) U^{1/a}`)
/// so that tiny concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet(rng: &mut ChaCha8Rng, k: usize, kappa: f64) -> Vec<f64> {
    let gamma = Gamma::new(kappa + 1.0, 1.0).expect("kappa is positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            g.ln() + u.ln() / kappa
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Splits `ds` over `k` clients with per-class proportions drawn from
/// `Dir_k(kappa)`. Rounding remainders go to the client with the largest
/// proportion. A draw that leaves some client empty is retried once.
pub fn partition_dirichlet(ds: &Dataset, k: usize, kappa: f64, seed: u64) -> Result<Vec<LocalDataset>> {
    if k == 0 {
        return Err(FedGraphError::InvalidParameter("need at least one client".into()));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(FedGraphError::InvalidParameter(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    match partition_attempt(ds, k, kappa, seed, 0) {
        Err(FedGraphError::EmptyClient(_)) => partition_attempt(ds, k, kappa, seed, 1),
        other => other,
    }
}

fn partition_attempt(ds: &Dataset, k: usize, kappa: f64, seed: u64, attempt: u64) -> Result<Vec<LocalDataset>> {
    let mut rng = stream_rng(seed, "partition", attempt, 0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for mut idx in by_class {
        let p = sample_dirichlet(&mut rng, k, kappa);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut counts: Vec<usize> = p.iter().map(|&pi| (pi * n as f64).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let top = (0..k).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        counts[top] += n - assigned;
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            owned[client].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    if let Some(empty) = owned.iter().position(|o| o.is_empty()) {
        return Err(FedGraphError::EmptyClient(empty));
    }
    Ok(owned
        .into_iter()
        .enumerate()
        .map(|(client, mut rows)| {
            rows.sort_unstable();
            let features = ds.features.select(Axis(0), &rows);
            let labels = rows.iter().map(|&i| ds.labels[i]).collect();
            let (train, test) = split_indices(rows.len(), seed, client as u64);
            LocalDataset {
                features,
                labels,
                train,
                test,
            }
        })
        .collect())
}

/// Shuffled 75/25 split; with two or more samples both sides are non-empty.
pub fn split_indices(n: usize, seed: u64, client: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "split", client, 0));
    let n_train = if n < 2 {
        n
    } else {
        ((TRAIN_FRACTION * n as f64).round() as usize).clamp(1, n - 1)
    };
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Clustered Gaussian-mixture benchmark.
///
/// All clusters share the class centres, but cluster `c` relabels centre `j`
/// as class `(j + c) mod n_classes`, so clients in different clusters need
/// different models. Each cluster draws label proportions from `Dir(kappa)`
/// over the classes and its clients sample `samples_per_client` points each
/// from that mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub samples_per_client: usize,
    /// Standard deviation of the class centres.
    pub class_sep: f64,
    /// Within-class standard deviation.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            n_features: 10,
            n_classes: 5,
            samples_per_client: 100,
            class_sep: 1.0,
            noise: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.n_features == 0 || self.n_classes < 2 || self.samples_per_client == 0 {
            return Err(FedGraphError::InvalidParameter(
                "synthetic data needs clusters, features, samples and at least two classes".into(),
            ));
        }
        if self.n_clusters > self.n_classes {
            return Err(FedGraphError::InvalidParameter(format!(
                "{} clusters but only {} distinct relabelings",
                self.n_clusters, self.n_classes
            )));
        }
        if !(self.class_sep > 0.0) || !(self.noise >= 0.0) {
            return Err(FedGraphError::InvalidParameter(
                "class_sep > 0 and noise >= 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// Client datasets plus the cluster of each client.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub clients: Vec<LocalDataset>,
    pub clusters: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl FederatedData {
    /// Sample counts per client.
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(LocalDataset::len).collect()
    }
}

/// Cluster of client `i` when `k` clients are cut into `c` contiguous blocks.
pub fn cluster_of(i: usize, k: usize, c: usize) -> usize {
    i * c / k
}

pub fn generate_clustered(spec: &SyntheticSpec, k: usize, kappa: f64, seed: u64) -> Result<FederatedData> {
    spec.validate()?;
    if k < spec.n_clusters {
        return Err(FedGraphError::InvalidParameter(format!(
            "{k} clients cannot fill {} clusters",
            spec.n_clusters
        )));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(FedGraphError::InvalidParameter(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let (p, q) = (spec.n_features, spec.n_classes);
    let mut rng = stream_rng(seed, "centres", 0, 0);
    let centres = Array2::from_shape_fn((q, p), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        spec.class_sep * z
    });

    let clusters: Vec<usize> = (0..k).map(|i| cluster_of(i, k, spec.n_clusters)).collect();
    let n = spec.samples_per_client;
    let mixes = (0..spec.n_clusters)
        .map(|c| {
            let mut rng = stream_rng(seed, "label-mix", c as u64, 0);
            WeightedIndex::new(sample_dirichlet(&mut rng, q, kappa))
                .map_err(|e| FedGraphError::InvalidParameter(format!("label mix: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut clients = Vec::with_capacity(k);
    for (client, &c) in clusters.iter().enumerate() {
        let mut rng = stream_rng(seed, "client-data", client as u64, 0);
        let mix = &mixes[c];
        let mut features = Array2::zeros((n, p));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let j = mix.sample(&mut rng);
            for f in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[[i, f]] = centres[[j, f]] + spec.noise * z;
            }
            labels.push((j + c) % q);
        }
        let (train, test) = split_indices(n, seed, client as u64);
        clients.push(LocalDataset {
            features,
            labels,
            train,
            test,
        });
    }
    Ok(FederatedData {
        clients,
        clusters,
        n_features: p,
        n_classes: q,
    })
}

/// Partition of an arbitrary dataset (e.g. MNIST) without cluster structure.
pub fn federate(ds: &Dataset, k: usize, kappa: f64, seed: u64) -> Result<FederatedData> {
    Ok(FederatedData {
        clients: partition_dirichlet(ds, k, kappa, seed)?,
        clusters: vec![0; k],
        n_features: ds.features.ncols(),
        n_classes: ds.n_classes,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_idx(path: &Path, expect_dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_u32(&mut f)?;
    if magic >> 8 != 0x08 || (magic & 0xff) as usize != expect_dims {
        return Err(FedGraphError::Format(format!(
            "{}: magic {magic:#010x}, expected unsigned-byte data with {expect_dims} dimensions",
            path.display()
        )));
    }
    let dims = (0..expect_dims)
        .map(|_| read_u32(&mut f).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = dims.iter().product();
    let mut data = vec![0u8; total];
    f.read_exact(&mut data)
        .map_err(|e| FedGraphError::Format(format!("{}: truncated payload ({e})", path.display())))?;
    Ok((dims, data))
}

/// Reads an IDX image/label file pair; pixels are scaled to `[0, 1]`.
/// `limit` keeps only the first `limit` samples.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images, 3)?;
    let (ldims, raw_labels) = read_idx(labels, 1)?;
    if idims[0] != ldims[0] {
        return Err(FedGraphError::Format(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let n = limit.map_or(idims[0], |l| l.min(idims[0]));
    let p = idims[1] * idims[2];
    let features = Array2::from_shape_fn((n, p), |(i, j)| pixels[i * p + j] as f64 / 255.0);
    let labels: Vec<usize> = raw_labels[..n].iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(features, labels, n_classes)
}
