use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    Dimension {
        context: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport failure at node {node}{}: {message}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    Transport {
        node: u32,
        batch: Option<u32>,
        message: String,
    },

    #[error("consistency check failed at epoch {epoch}, batch {batch}: max abs diff {max_abs_diff:e} > tolerance {tolerance:e}")]
    Consistency {
        epoch: usize,
        batch: u32,
        max_abs_diff: f64,
        tolerance: f64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }
}
