use thiserror::Error;

/// Errors surfaced by the library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("load error at row {row}, column {column}: {message}")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
