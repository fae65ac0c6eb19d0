//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected geometry) disagree in shape.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar or structural argument is outside its documented domain.
    #[error("{0}")]
    InvalidArgument(String),

    /// An optimizer step was requested before a gradient reached the parameter.
    #[error("parameter '{0}' has no accumulated gradient")]
    MissingGradient(String),

    #[error("homography is singular (|det| = {0:.3e})")]
    SingularHomography(f64),

    #[error("point projects to infinity (homogeneous w = {0:.3e})")]
    PointAtInfinity(f64),

    #[error("homography estimation failed: {0}")]
    EstimationFailed(String),

    /// Training hit a non-finite loss; the last finite state was checkpointed.
    #[error("training diverged at iteration {iter}; last good checkpoint: {checkpoint}")]
    Diverged { iter: usize, checkpoint: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
