//! The federated round loop with pluggable server-side aggregation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::channel::{ChannelDraw, ChannelSpec};
use super::data::{federate, generate_clustered, load_idx, Dataset, FederatedData, SyntheticSpec};
use super::model::{local_update, LocalTrainConfig, SoftmaxModel};
use super::stream_rng;
use crate::aggregate::{
    aggregate_adjacency, aggregate_clusterwise, aggregate_mean, aggregate_smooth, aggregate_two_step,
    AggregationParams, Clustering,
};
use crate::error::{FedGraphError, Result};
use crate::graph::{ClientWeights, GraphWeights, ParamMatrix};
use crate::jgesr::{pdca_solve, JgesrParams};
use crate::learn::{cosine_similarity_graph, learn_graph, GraphLearnParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Smooth,
    Clusterwise,
    Adjacency,
    TwoStep,
    Jgesr,
}

impl Aggregator {
    pub const ALL: [Aggregator; 6] = [
        Aggregator::Mean,
        Aggregator::Smooth,
        Aggregator::Clusterwise,
        Aggregator::Adjacency,
        Aggregator::TwoStep,
        Aggregator::Jgesr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Smooth => "smooth",
            Aggregator::Clusterwise => "clusterwise",
            Aggregator::Adjacency => "adjacency",
            Aggregator::TwoStep => "two_step",
            Aggregator::Jgesr => "jgesr",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = FedGraphError;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FedGraphError::Config(format!("unknown aggregator {s:?}")))
    }
}

/// Where client data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// IDX image/label pair (the MNIST layout).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Every knob of a federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    /// Number of clients K.
    pub clients: usize,
    /// Communication rounds R.
    pub rounds: usize,
    /// Local epochs E.
    pub epochs: usize,
    /// Local step size.
    pub eta: f64,
    /// Weight of the local pull towards the received global model.
    pub mu: f64,
    pub batch_size: usize,
    /// Dirichlet concentration of the label partition.
    pub kappa: f64,
    pub missing_rate: f64,
    /// Noise level `s`; client noise is `s` times the mean absolute initial parameter.
    pub noise_scale: f64,
    /// Standard deviation of the shared random initial model.
    pub init_scale: f64,
    pub aggregator: Aggregator,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub jgesr: JgesrParams,
    /// Graph learning used by the smooth, cluster-wise and adjacency baselines.
    pub graph: GraphLearnParams,
    /// Filter strength of the smooth baseline.
    pub smoothing: AggregationParams,
    /// Alternations of the two-step baseline.
    pub two_step_iters: usize,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            rounds: 30,
            epochs: 5,
            eta: 0.01,
            mu: 1.0,
            batch_size: 32,
            kappa: 0.05,
            missing_rate: 0.0,
            noise_scale: 0.1,
            init_scale: 0.1,
            aggregator: Aggregator::Jgesr,
            seeds: vec![0],
            data: DataSource::default(),
            jgesr: JgesrParams::default(),
            graph: GraphLearnParams::default(),
            smoothing: AggregationParams::default(),
            two_step_iters: 1,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedGraphError::Config(m));
        if self.clients < 2 {
            return bad(format!("clients must be at least 2, got {}", self.clients));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (name, v) in [
            ("eta", self.eta),
            ("kappa", self.kappa),
            ("init_scale", self.init_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.mu >= 0.0) || !(self.noise_scale >= 0.0) {
            return bad("mu and noise_scale must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate must lie in [0, 1], got {}", self.missing_rate));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| FedGraphError::Config(e.to_string()))?;
        }
        self.jgesr
            .validate()
            .map_err(|e| FedGraphError::Config(e.to_string()))?;
        self.graph
            .validate()
            .map_err(|e| FedGraphError::Config(e.to_string()))?;
        self.smoothing
            .validate()
            .map_err(|e| FedGraphError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn local(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.epochs,
            eta: self.eta,
            mu: self.mu,
            batch_size: self.batch_size,
        }
    }
}

/// Local-test metrics of one client after one round (round 0 is the
/// shared initial model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Mean over clients of the local-test accuracy after the last completed round.
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub rounds_completed: usize,
    /// Channel digest of every round, shared by all aggregators.
    pub channel_digests: Vec<String>,
    /// Rounds whose solver stopped at its iteration cap.
    pub unconverged_rounds: usize,
    pub error: Option<String>,
    pub metrics: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub aggregator: Aggregator,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    pub seeds: Vec<SeedReport>,
}

impl RunReport {
    pub fn failed_seeds(&self) -> Vec<u64> {
        self.seeds
            .iter()
            .filter(|s| s.error.is_some())
            .map(|s| s.seed)
            .collect()
    }
}

/// Fixed per-seed ingredients: client data, the shared initial model and
/// the channel. Independent of the aggregator.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub model: SoftmaxModel,
    pub data: FederatedData,
    pub zeta: ClientWeights,
    pub psi0: Array1<f64>,
    pub channel: ChannelSpec,
    train: Vec<(Array2<f64>, Vec<usize>)>,
    test: Vec<(Array2<f64>, Vec<usize>)>,
}

impl SeedSetup {
    pub fn new(cfg: &FlConfig, seed: u64, source: Option<&Dataset>) -> Result<Self> {
        let data = match (&cfg.data, source) {
            (DataSource::Synthetic(spec), _) => generate_clustered(spec, cfg.clients, cfg.kappa, seed)?,
            (DataSource::Idx { .. }, Some(ds)) => federate(ds, cfg.clients, cfg.kappa, seed)?,
            (DataSource::Idx { images, labels, limit }, None) => {
                federate(&load_idx(images, labels, *limit)?, cfg.clients, cfg.kappa, seed)?
            }
        };
        Self::from_data(cfg, seed, data)
    }

    /// Setup around client data supplied by the caller.
    pub fn from_data(cfg: &FlConfig, seed: u64, data: FederatedData) -> Result<Self> {
        if data.clients.len() != cfg.clients {
            return Err(FedGraphError::Config(format!(
                "{} client datasets for {} clients",
                data.clients.len(),
                cfg.clients
            )));
        }
        let model = SoftmaxModel::new(data.n_features, data.n_classes);
        let zeta = ClientWeights::from_counts(&data.sizes())?;
        let normal = Normal::new(0.0, cfg.init_scale)
            .map_err(|e| FedGraphError::InvalidParameter(format!("init_scale: {e}")))?;
        let mut rng = stream_rng(seed, "init", 0, 0);
        let psi0 = Array1::from_shape_fn(model.dim(), |_| normal.sample(&mut rng));
        let channel = ChannelSpec::from_initial(cfg.missing_rate, cfg.noise_scale, psi0.view(), cfg.clients)?;
        let train = data.clients.iter().map(|c| c.train_set()).collect();
        let test = data.clients.iter().map(|c| c.test_set()).collect();
        Ok(Self {
            seed,
            model,
            data,
            zeta,
            psi0,
            channel,
            train,
            test,
        })
    }

    /// Hex SHA-256 of the client data, splits and initial model.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.data.clients {
            h.update((c.len() as u64).to_le_bytes());
            for v in c.features.iter().chain(self.psi0.iter()) {
                h.update(v.to_le_bytes());
            }
            for &i in c.labels.iter().chain(&c.train).chain(&c.test) {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn n_clients(&self) -> usize {
        self.data.clients.len()
    }

    /// The channel realisation of round `round` (1-based).
    pub fn channel_draw(&self, round: usize) -> Result<ChannelDraw> {
        ChannelDraw::sample(
            self.n_clients(),
            self.model.dim(),
            &self.channel,
            &mut stream_rng(self.seed, "channel", round as u64, 0),
        )
    }

    fn evaluate(&self, psi: &ParamMatrix, round: usize) -> Vec<RoundMetrics> {
        (0..self.n_clients())
            .map(|k| {
                let (x, y) = &self.test[k];
                let (accuracy, loss) = self.model.evaluate(psi.row(k), x.view(), y);
                RoundMetrics {
                    seed: self.seed,
                    round,
                    client: k,
                    accuracy,
                    loss,
                }
            })
            .collect()
    }
}

/// Models held by the clients between rounds (row `k` is client `k`'s).
#[derive(Debug, Clone)]
pub struct FlState {
    pub psi: ParamMatrix,
    pub round: usize,
}

impl FlState {
    pub fn initial(setup: &SeedSetup) -> Self {
        let psi = setup
            .psi0
            .broadcast((setup.n_clients(), setup.model.dim()))
            .expect("row broadcast")
            .to_owned();
        Self { psi, round: 0 }
    }
}

/// What the server produced in one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub channel_digest: String,
    pub converged: bool,
    /// Graph used or learned by the aggregator, if any.
    pub graph: Option<GraphWeights>,
}

/// Server-side aggregation of the received matrix.
pub fn aggregate(
    agg: Aggregator,
    x_tilde: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    zeta: &ClientWeights,
    cfg: &FlConfig,
) -> Result<(ParamMatrix, Option<GraphWeights>, bool)> {
    let learned = |x: ArrayView2<f64>| -> Result<(GraphWeights, bool)> {
        match learn_graph(x, &cfg.graph) {
            Ok(g) => Ok((g, true)),
            Err(FedGraphError::GraphNoConvergence { last, .. }) => Ok((*last, false)),
            Err(e) => Err(e),
        }
    };
    match agg {
        Aggregator::Mean => Ok((aggregate_mean(x_tilde, zeta)?, None, true)),
        Aggregator::Smooth => {
            let (g, ok) = learned(x_tilde)?;
            Ok((aggregate_smooth(x_tilde, &g, zeta, &cfg.smoothing)?, Some(g), ok))
        }
        Aggregator::Clusterwise => {
            let (g, ok) = learned(x_tilde)?;
            let c = Clustering::from_graph(&g);
            Ok((aggregate_clusterwise(x_tilde, &c)?, Some(g), ok))
        }
        Aggregator::Adjacency => {
            let (g, ok) = learned(x_tilde)?;
            Ok((aggregate_adjacency(x_tilde, &g)?, Some(g), ok))
        }
        Aggregator::TwoStep => {
            let glp = GraphLearnParams {
                alpha: cfg.jgesr.alpha,
                beta: cfg.jgesr.beta,
                gamma: cfg.jgesr.gamma,
                ..cfg.graph
            };
            let ap = AggregationParams {
                mu: cfg.jgesr.mu,
                alpha: cfg.jgesr.alpha,
            };
            let out = aggregate_two_step(x_tilde, mask, zeta, &glp, &ap, cfg.two_step_iters)?;
            Ok((out.psi, Some(out.graph), true))
        }
        Aggregator::Jgesr => {
            let w0 = cosine_similarity_graph(x_tilde).graph;
            match pdca_solve(x_tilde, mask, zeta, &w0, &cfg.jgesr) {
                Ok(st) => Ok((st.psi, Some(st.w), true)),
                Err(FedGraphError::SolverNoConvergence {
                    state,
                    iterations,
                    residual,
                }) => {
                    log::warn!("PDCA stopped after {iterations} iterations (last step {residual:.3e})");
                    Ok((state.psi, Some(state.w), false))
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Models after local training in round `state.round + 1`, one row per client.
pub fn local_models(state: &FlState, setup: &SeedSetup, cfg: &FlConfig) -> ParamMatrix {
    let round = state.round + 1;
    let local_cfg = cfg.local();
    let rows: Vec<Array1<f64>> = (0..setup.n_clients())
        .into_par_iter()
        .map(|k| {
            let (x, y) = &setup.train[k];
            let mut rng = stream_rng(setup.seed, "sgd", k as u64, round as u64);
            local_update(&setup.model, state.psi.row(k), x.view(), y, &local_cfg, &mut rng)
        })
        .collect();
    let mut local = Array2::zeros(state.psi.dim());
    for (k, row) in rows.into_iter().enumerate() {
        local.row_mut(k).assign(&row);
    }
    local
}

/// Local training on every client, the channel, aggregation, evaluation.
pub fn run_round(state: &mut FlState, setup: &SeedSetup, cfg: &FlConfig, agg: Aggregator) -> Result<RoundOutcome> {
    let round = state.round + 1;
    let local = local_models(state, setup, cfg);
    let draw = setup.channel_draw(round)?;
    let x_tilde = draw.apply(local.view())?;
    let (psi, graph, converged) = aggregate(agg, x_tilde.view(), draw.mask.view(), &setup.zeta, cfg)?;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(FedGraphError::SingularSystem(format!(
            "{agg} produced non-finite parameters"
        )));
    }
    state.psi = psi;
    state.round = round;
    Ok(RoundOutcome {
        metrics: setup.evaluate(&state.psi, round),
        channel_digest: draw.digest(),
        converged,
        graph,
    })
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// One seed end to end; aggregation failures end the run early and are
/// recorded in the report together with the metrics gathered so far.
pub fn run_seed(cfg: &FlConfig, setup: &SeedSetup, agg: Aggregator) -> SeedReport {
    let mut state = FlState::initial(setup);
    let mut metrics = setup.evaluate(&state.psi, 0);
    let mut last = metrics.clone();
    let mut digests = Vec::with_capacity(cfg.rounds);
    let mut unconverged = 0;
    let mut error = None;
    for _ in 0..cfg.rounds {
        match run_round(&mut state, setup, cfg, agg) {
            Ok(out) => {
                digests.push(out.channel_digest);
                unconverged += usize::from(!out.converged);
                metrics.extend(out.metrics.iter().cloned());
                last = out.metrics;
            }
            Err(e) => {
                log::error!("seed {}: round {} failed: {e}", setup.seed, state.round + 1);
                error = Some(e.to_string());
                break;
            }
        }
    }
    SeedReport {
        seed: setup.seed,
        final_accuracy: mean_finite(last.iter().map(|m| m.accuracy)),
        final_loss: mean_finite(last.iter().map(|m| m.loss)),
        rounds_completed: state.round,
        channel_digests: digests,
        unconverged_rounds: unconverged,
        error,
        metrics,
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Loads the source dataset once when the config points at files.
pub fn load_source(cfg: &FlConfig) -> Result<Option<Dataset>> {
    match &cfg.data {
        DataSource::Synthetic(_) => Ok(None),
        DataSource::Idx { images, labels, limit } => load_idx(images, labels, *limit).map(Some),
    }
}

/// Builds the per-seed setups (in parallel, returned in seed order).
pub fn prepare_seeds(cfg: &FlConfig) -> Result<Vec<SeedSetup>> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    cfg.seeds
        .par_iter()
        .map(|&s| SeedSetup::new(cfg, s, source.as_ref()))
        .collect()
}

pub fn summarize(agg: Aggregator, seeds: Vec<SeedReport>) -> RunReport {
    let finals: Vec<f64> = seeds
        .iter()
        .filter(|s| s.error.is_none())
        .map(|s| s.final_accuracy)
        .collect();
    let (mean, std) = mean_std(&finals);
    RunReport {
        aggregator: agg,
        mean_final_accuracy: mean,
        std_final_accuracy: std,
        seeds,
    }
}

/// Runs `agg` on prepared seeds.
pub fn run_prepared(cfg: &FlConfig, setups: &[SeedSetup], agg: Aggregator) -> RunReport {
    let seeds = setups.par_iter().map(|s| run_seed(cfg, s, agg)).collect();
    summarize(agg, seeds)
}

/// Every configured seed with the configured aggregator.
pub fn run_experiment(cfg: &FlConfig) -> Result<RunReport> {
    let setups = prepare_seeds(cfg)?;
    Ok(run_prepared(cfg, &setups, cfg.aggregator))
}
