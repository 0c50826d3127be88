use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid value for {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error(
        "dirichlet partition left a client empty after {attempts} attempts; \
         use a larger dataset, fewer clients, or a larger alpha"
    )]
    PartitionFailed { attempts: usize },

    #[error("coordinate {coordinate} is selected only by senders with zero data size")]
    ZeroDataSize { coordinate: usize },

    #[error("protocol violation: client {client_id} is missing a {what} for class {class_id}")]
    ProtocolViolation {
        client_id: usize,
        class_id: usize,
        what: &'static str,
    },

    #[error("trace check failed: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_len(axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            axis,
            expected,
            found,
        })
    }
}
