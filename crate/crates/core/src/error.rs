use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate entry for area {area}, cell {cell}")]
    DuplicateKey { area: String, cell: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown area id `{0}`")]
    UnknownArea(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("Moran operator has no positive eigenvalues")]
    EmptyBasis,
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("sampler diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },
    #[error("degenerate chain: {0}")]
    DegenerateChain(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Coarse category used by front ends to pick an exit status.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::NotPositiveDefinite(_)
            | Error::Numerical(_)
            | Error::Divergence { .. }
            | Error::DegenerateChain(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}
