use std::fmt;

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorCategory::Config => f.write_str("config-error"),
            ErrorCategory::Data => f.write_str("data-error"),
            ErrorCategory::Numeric => f.write_str("numeric-error"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("negative edge weight {weight} at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize, weight: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("cannot sample from a distribution with zero mass on the grid")]
    ZeroDensity,

    #[error("empty sample list")]
    EmptySamples,

    #[error("chain start index {0} has zero prior mass")]
    ZeroMassStart(usize),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidGrid(_) | Error::InvalidDistribution(_) => {
                ErrorCategory::Config
            }
            Error::NonFinite(_) | Error::ZeroDensity | Error::TapeConsumed => {
                ErrorCategory::Numeric
            }
            Error::ShapeMismatch { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn parse(path: impl fmt::Display, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
