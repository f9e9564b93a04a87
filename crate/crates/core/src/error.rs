use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("manifest {path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown phoneme symbol `{0}`")]
    UnknownSymbol(String),

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("external command: {0}")]
    External(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
