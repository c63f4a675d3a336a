use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths or layouts that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The simulator failed to produce a value.
    #[error("simulator error: {message}")]
    Simulator { message: String, output: String },

    /// A covariance matrix could not be factorized even after jitter.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    /// The sampler could not start from the requested point.
    #[error("initialization error: {0}")]
    Initialization(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An operation was called on an object that is not ready for it.
    #[error("state error: {0}")]
    State(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors the sampler treats as a zero-density proposal rather
    /// than a failure of the run.
    pub fn is_domain(&self) -> bool {
        matches!(self, Error::Domain(_))
    }
}
