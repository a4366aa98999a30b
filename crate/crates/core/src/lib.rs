//! Graph-based aggregation for federated learning over noisy, lossy channels.
//!
//! The server receives degraded client parameters `X~ = M . X + N`, jointly
//! estimates an inter-client graph and the restored parameters, and sends each
//! client its personalised row. Module map:
//!
//! * [`graph`]: Laplacians, distance operator and its adjoint, half-vector maps.
//! * [`learn`]: graph learning from smooth signals, cosine warm start.
//! * [`aggregate`]: mean, smoothing filter, cluster-wise, adjacency-wise and
//!   the alternating two-step baseline.
//! * [`jgesr`]: the difference-of-convex split and the proximal DC solver.
//! * [`sim`]: data partitioning, local training, channel, round loop.
//! * [`harness`]: experiment configs and the `run` / `compare` /
//!   `sweep-missing` commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod error;
pub mod graph;
pub mod harness;
pub mod jgesr;
pub mod learn;
mod linalg;
mod logdeg;
pub mod sim;

pub use error::{FedGraphError, Result};
pub use graph::{ClientWeights, GraphWeights, ParamMatrix};

/// Version string embedded in every artifact.
pub const VERSION: &str = concat!("fedgraph ", env!("CARGO_PKG_VERSION"));
