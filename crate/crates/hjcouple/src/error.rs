use thiserror::Error;

/// Errors raised by the library.
///
/// Input-shaped variants map to CLI exit code 2; `Precondition` and
/// `Numerical` are reported as failed checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("field `{field}` violates its declared bound at {point:?} (value {value})")]
    BoundViolation {
        field: String,
        point: Vec<f64>,
        value: f64,
    },

    #[error("{what} is not available for field `{field}`")]
    MissingDerivative { what: &'static str, field: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at offset {pos} in `{source_text}`: {msg}")]
    Parse {
        pos: usize,
        msg: String,
        source_text: String,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors caused by a malformed document or bad arguments.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Precondition(_) | Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::Dimension { expected, got })
    } else {
        Ok(())
    }
}
