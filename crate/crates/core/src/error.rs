use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite gradient")]
    NonFinite,
    #[error("gradient length must be at least 1")]
    EmptyGradient,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("corrupt message: {0}")]
    CorruptMessage(String),
    #[error("worker count required for clipping")]
    WorkerCountRequired,
    #[error("quantization levels must be a power of two for bit accounting, got {0}")]
    LevelsNotPowerOfTwo(u32),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("diverged")]
    Diverged,
    #[error("{path}: {reason}")]
    Data { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
