use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("degenerate step: the update vector has zero norm")]
    DegenerateStep,

    #[error("mini-batch gradient norm {0:e} is below the guard threshold")]
    ZeroGradient(f64),

    #[error("batch of size {0} is too small, at least {1} samples are needed")]
    BatchTooSmall(usize, usize),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("mini-batch loss {0:e} is not positive")]
    NonPositiveLoss(f64),

    #[error(
        "{what} needs {dim} basis evaluations which exceeds the cap of {cap}; \
         raise the cap explicitly or switch to the Monte-Carlo estimator"
    )]
    CapExceeded {
        what: &'static str,
        dim: usize,
        cap: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("log line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
