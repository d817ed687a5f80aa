use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("int32 accumulator overflow in {0}")]
    Overflow(String),

    #[error("degenerate calibration range at site `{0}` (max == min)")]
    DegenerateRange(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("backward called without a forward trace")]
    MissingTrace,

    #[error("model file: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures rooted in arithmetic (divergence, overflow, non-finite values,
    /// degenerate ranges) as opposed to I/O or usage errors.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Overflow(_)
                | Error::DegenerateRange(_)
                | Error::Divergence { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Image { .. } | Error::Format(_) | Error::Dataset(_)
        )
    }
}
