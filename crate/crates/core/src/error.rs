use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// The CLI maps [`MsgmError::Numerical`] to exit code 2 and every other
/// variant to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum MsgmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl MsgmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MsgmError::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        MsgmError::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MsgmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, MsgmError::Numerical(_))
    }
}

pub type Result<T, E = MsgmError> = std::result::Result<T, E>;
