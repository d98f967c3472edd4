use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corrupt input {path}: {reason}")]
    CorruptInput { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("weight archive integrity error: {0}")]
    Integrity(String),

    #[error("weight archive does not match network: {0}")]
    ArchiveMismatch(String),

    #[error("split is empty")]
    EmptySplit,

    #[error("non-finite loss at epoch {epoch}, step {step}; batch ids: {batch_ids:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
    },

    #[error("inference error ({variant}): {reason}")]
    Inference { variant: String, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
