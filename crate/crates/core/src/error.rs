use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument outside the operation's domain (non-positive sizes, bad ranges).
    #[error("domain error: {0}")]
    Domain(String),

    /// A profile, preset, or calibration table that is missing data or violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// The requested placement does not fit the available GPU and CPU memory.
    #[error("infeasible placement: {0}")]
    Infeasible(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}
