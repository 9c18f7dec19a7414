use std::io;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("singular 3x3 system (|det| = {det:e} after regularization)")]
    SingularSystem { det: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("degenerate view at level {level}: valid fraction {fraction:.4} below {min:.4}")]
    DegenerateView {
        level: usize,
        fraction: f64,
        min: f64,
    },

    #[error("pixel ({u}, {v}) does not hit the ground plane")]
    InvalidPixel { u: f64, v: f64 },

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tensor file format error: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps the error with a human-readable context string.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the solver gave up on an ill-posed sample (singular normal
    /// equations or too few valid pixels), as opposed to a bug or bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularSystem { .. } | Error::DegenerateView { .. }
        )
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
