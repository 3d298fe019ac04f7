use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical scheme would lose a structural guarantee (CFL, ordering, monotonicity).
    #[error("scheme integrity violated: {0}")]
    Scheme(String),

    /// A statistical estimate failed a required property.
    #[error("estimation failed: {0}")]
    Estimation(String),

    /// Exact enumeration would exceed the state-space cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A linear solve did not reach its tolerance.
    #[error("linear solve failed: {0}")]
    Solver(String),

    /// Invalid experiment configuration; the message names the offending field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
