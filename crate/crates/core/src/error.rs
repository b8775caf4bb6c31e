use thiserror::Error;

/// Errors surfaced by model fitting, data generation, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("similarity kernel property violated: {property} at t = {at}")]
    KernelProperty { property: &'static str, at: f64 },

    #[error("invalid kernel configuration: {0}")]
    KernelConfig(String),

    #[error(
        "aggregation weight feasibility violated: gamma * (m-1) * A'(0) = {value} > 1 \
         (m = {m}); maximal admissible gamma = {max_gamma}"
    )]
    WeightFeasibility { value: f64, m: usize, max_gamma: f64 },

    #[error("inner solver exceeded {max_iter} iterations; gradient residual {residual}")]
    InnerSolver { max_iter: usize, residual: f64 },

    #[error("non-finite iterate at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("under-determined dataset: n = {n} rows but {p} parameters")]
    UnderDetermined { n: usize, p: usize },

    #[error("optimizer diverged: {0}")]
    Divergence(String),

    #[error("MAPE requires positive truth, got {0}")]
    NonPositiveTruth(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
