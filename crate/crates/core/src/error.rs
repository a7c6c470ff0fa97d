use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or out-of-domain numeric input.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration or parameters.
    #[error("config error: {0}")]
    Config(String),

    /// Normal equations of the least-squares fit are singular.
    #[error("ill-conditioned fit: basis function {index} ({name}) has pivot {pivot:e}")]
    IllConditioned {
        index: usize,
        name: String,
        pivot: f64,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bridge error: {0}")]
    Bridge(String),

    /// A session was stopped before it finished.
    #[error("interrupted")]
    Interrupted,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains non-finite value {v}")));
    }
    Ok(())
}
