use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UgdError>;

#[derive(Debug, Error)]
pub enum UgdError {
    #[error("view-missing rate {eta} is infeasible for {views} views (max {max})")]
    InfeasibleEta { eta: f64, views: usize, max: f64 },

    #[error("insufficient pool: {0}")]
    InsufficientPool(String),

    #[error("schema mismatch in {path}: {reason}")]
    SchemaMismatch { path: PathBuf, reason: String },

    #[error("class {class} has fewer than 2 samples in view {view}")]
    TooFewSamples { class: usize, view: usize },

    #[error("base set contains a sample with missing views")]
    IncompleteBase,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("sample has no available view")]
    NoAvailableView,

    #[error("retrieval set is empty")]
    EmptyRetrieval,

    #[error("covariance factorization failed in view {view}")]
    FactorizationFailure { view: usize },

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("class {0} has no anchors")]
    EmptyClass(usize),

    #[error("cannot cosine-normalize a zero vector")]
    ZeroVector,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("episode exceeded its {0:.1}s time budget")]
    Timeout(f64),

    #[error("no results to report")]
    EmptyResults,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl UgdError {
    pub(crate) fn schema(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        UgdError::SchemaMismatch {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UgdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            UgdError::Config(_) | UgdError::InfeasibleEta { .. } => 2,
            UgdError::InsufficientPool(_)
            | UgdError::SchemaMismatch { .. }
            | UgdError::TooFewSamples { .. }
            | UgdError::IncompleteBase
            | UgdError::Io { .. } => 3,
            _ => 4,
        }
    }
}
