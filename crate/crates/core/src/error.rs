use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A row of an input file could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A curve knot violates ordering or monotonicity.
    #[error("knot {index}: {message}")]
    Validation { index: usize, message: String },

    /// A value lies outside its admissible interval.
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A structurally valid file with inconsistent content (ragged timing, ...).
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },

    /// Caller supplied arguments that violate a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A filter lost covariance health or a factorization failed.
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
