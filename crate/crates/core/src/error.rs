use thiserror::Error;

/// Errors raised across the crate. Variants follow the failure classes the
/// public operations document (shape, numeric, contract, configuration, ...).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not positive definite (pivot {pivot} at row {row}, last jitter {jitter:e})")]
    NotSpd { row: usize, pivot: f64, jitter: f64 },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("power flow diverged after {iterations} iterations (mismatch trace {trace:?})")]
    Divergence { iterations: usize, trace: Vec<f64> },

    #[error("dataset generation failed for seed {seed}: {msg}")]
    Generation { seed: u64, msg: String },

    #[error("non-finite loss at step {step} (batch seeds {seeds:?})")]
    NonFiniteLoss { step: usize, seeds: Vec<u64> },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
