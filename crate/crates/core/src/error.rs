use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("probe below accuracy floor: {0}")]
    ProbeFloor(String),
    #[error("invalid value for `{key}`: {constraint}")]
    Validation { key: String, constraint: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(String),
    #[error("wav codec error: {0}")]
    Wav(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn hash_mismatch(what: &str, expected: &str, found: &str) -> Self {
        Error::HashMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn validation(key: &str, constraint: impl Into<String>) -> Self {
        Error::Validation {
            key: key.to_string(),
            constraint: constraint.into(),
        }
    }
}
