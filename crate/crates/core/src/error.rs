use std::path::PathBuf;

/// Errors raised anywhere in the audit pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value at step {step}: {what}")]
    Numerics { step: usize, what: String },

    #[error("schema error at line {line}, field `{field}`: {msg}")]
    Schema {
        line: usize,
        field: String,
        msg: String,
    },

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("skipped: {0}")]
    Skipped(String),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn schema(line: usize, field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            line,
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "InputError",
            Error::Numerics { .. } => "NumericsError",
            Error::Schema { .. } => "SchemaError",
            Error::Generation(_) => "GenerationError",
            Error::StaleCache(_) => "StaleCacheError",
            Error::Degenerate(_) => "DegenerateError",
            Error::Skipped(_) => "SkippedError",
            Error::Divergence { .. } => "DivergenceError",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}
