use thiserror::Error;

/// Errors raised by grids, models and solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource limit: n = {requested} exceeds the enumeration cap {cap}")]
    ResourceLimit { requested: usize, cap: usize },

    /// The implicit step needs `delta * K < 1`.
    #[error("step too coarse: delta*K = {contraction} >= 1, need at least n = {min_steps} steps")]
    StepTooCoarse { contraction: f64, min_steps: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unknown registry key `{0}`")]
    NotFound(String),

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("fixed point did not converge at level {level}, node {node} (residual {residual:e})")]
    NumericFailure {
        level: usize,
        node: usize,
        residual: f64,
    },

    #[error("series diverges: b*delta = {product} >= 1")]
    DivergentSeries { product: f64 },

    #[error("empty report: no samples requested")]
    EmptyReport,
}

pub type Result<T> = std::result::Result<T, Error>;
