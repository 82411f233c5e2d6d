use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, templates, or schemas. Detected before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Several configuration problems reported together.
    #[error("configuration errors:\n  - {}", .0.join("\n  - "))]
    ConfigList(Vec<String>),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("backend `{plm_id}`: {message}")]
    Backend { plm_id: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(plm_id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            plm_id: plm_id.into(),
            message: message.into(),
        }
    }

    /// True for errors raised while validating configuration, before a run starts.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ConfigList(_) | Error::MissingFile(_)
        )
    }
}
