use thiserror::Error;

/// Errors raised by the retrieval library.
#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{param} = {value} is outside the lookup-table range [{lo}, {hi}]")]
    OutOfRange {
        param: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("forward model singular at channel {channel}: 1 - s*rho = {denominator}")]
    Singularity { channel: usize, denominator: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("optimization diverged after {iterations} iterations: {reason}")]
    Diverged { iterations: usize, reason: String },

    #[error("ill-conditioned matrix (condition estimate {condition:.3e}): {context}")]
    IllConditioned { condition: f64, context: String },

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RetrievalError {
    /// True for failures of the numerical machinery, as opposed to bad inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            RetrievalError::Singularity { .. }
                | RetrievalError::NotSpd(_)
                | RetrievalError::Diverged { .. }
                | RetrievalError::IllConditioned { .. }
                | RetrievalError::Degenerate(_)
        )
    }
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;
