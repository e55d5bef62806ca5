use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("fragment {0} out of range")]
    FragmentRange(usize),

    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),

    #[error("undefined weight: {0}")]
    UndefinedWeight(String),

    #[error("no contributions to merge")]
    NoQuorum,

    #[error("averaged direction is degenerate")]
    DegenerateDirection,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("config hash mismatch: tape has {tape}, run has {run}")]
    ConfigHashMismatch { tape: String, run: String },

    #[error("replay integrity error at seq {seq}: {message}")]
    ReplayIntegrity { seq: u64, message: String },

    #[error("snapshot integrity error: {0}")]
    SnapshotIntegrity(String),

    #[error("recovery unavailable: {0}")]
    RecoveryUnavailable(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    pub fn integrity(seq: u64, message: impl Into<String>) -> Self {
        Error::ReplayIntegrity { seq, message: message.into() }
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Codec(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
