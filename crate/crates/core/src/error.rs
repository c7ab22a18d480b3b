use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("preset: {0}")]
    Preset(String),

    #[error("topology: {0}")]
    Topology(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("non-finite value at outer {k}, sweep {v}, client {client}")]
    NonFinite { k: usize, v: usize, client: usize },

    #[error("local solve diverged (non-finite objective after {iterations} iterations); step size may be too large")]
    Divergence { iterations: usize },

    #[error("client {client} (level {level}): {source}")]
    Sweep {
        client: usize,
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Precondition(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
