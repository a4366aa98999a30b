use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedGraphError>;

#[derive(Debug, Error)]
pub enum FedGraphError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("node {0} has zero degree")]
    IsolatedNode(usize),

    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("graph learning did not converge after {iterations} iterations (residual {residual:.3e})")]
    GraphNoConvergence {
        iterations: usize,
        residual: f64,
        last: Box<crate::graph::GraphWeights>,
    },

    #[error("PDCA did not converge after {iterations} iterations (last step {residual:.3e})")]
    SolverNoConvergence {
        iterations: usize,
        residual: f64,
        state: Box<crate::jgesr::JgesrState>,
    },

    #[error("client {0} received no samples")]
    EmptyClient(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FedGraphError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        FedGraphError::DimensionMismatch(msg.into())
    }
}
