use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("scorer `{scorer}` failed: {message}")]
    Scoring { scorer: String, message: String },
    #[error("adaptation error: {0}")]
    Adaptation(String),
    #[error("fisher estimation error: {0}")]
    Estimation(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    DigestMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("unsupported schema version {found} for {what} (expected {expected})")]
    SchemaVersion {
        what: String,
        expected: u32,
        found: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn scoring(scorer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scoring {
            scorer: scorer.into(),
            message: message.into(),
        }
    }
}
