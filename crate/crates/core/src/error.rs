use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible for an operation.
    #[error("{op}: dimension mismatch on {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },

    /// Model or training configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Transposed convolution whose kernel size is not a multiple of its stride.
    #[error("checkerboard risk: kernel size {kernel} is not divisible by stride {stride}")]
    Checkerboard { kernel: usize, stride: usize },

    /// Out-of-range user input (dose fraction, split fractions, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Malformed file contents.
    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    /// Checkpoint does not match the model it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// The training loss became NaN or infinite.
    #[error("non-finite loss at step {step}; last good checkpoint: {last_good}")]
    NonFinite { step: usize, last_good: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
