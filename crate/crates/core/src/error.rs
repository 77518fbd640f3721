use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A required field is missing from a structured input document.
    #[error("schema error: missing required field `{field}`")]
    Schema { field: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// The backend cannot provide an optional capability (e.g. decode-graph preparation).
    #[error("capability error: {0}")]
    Capability(String),

    #[error("backend error: {message}")]
    Backend {
        message: String,
        #[source]
        cause: Option<Box<dyn std::error::Error + Send + Sync>>,
    },

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("power source `{device}` unavailable: {message}")]
    Device { device: String, message: String },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn backend(message: impl Into<String>) -> Self {
        Error::Backend {
            message: message.into(),
            cause: None,
        }
    }

    pub fn backend_with(
        message: impl Into<String>,
        cause: impl std::error::Error + Send + Sync + 'static,
    ) -> Self {
        Error::Backend {
            message: message.into(),
            cause: Some(Box::new(cause)),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_run(self, run: usize) -> Self {
        Error::Run {
            run,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 for user errors (bad flags, inconsistent plan), 1 for everything
    /// that fails while measuring.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Run { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
