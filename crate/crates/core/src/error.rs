use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum OscError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl OscError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        OscError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors the CLI reports as configuration problems (exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, OscError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, OscError>;
