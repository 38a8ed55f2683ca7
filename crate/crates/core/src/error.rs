use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated payload")]
    Truncated { path: PathBuf },
    #[error("{path}: dims {dims:?} overflow")]
    DimOverflow { path: PathBuf, dims: Vec<usize> },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    AudioTooShort { samples: usize, window: usize },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("need at least {min} {what}, got {got}")]
    TooFew {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("mode {mode} needs `{field}`, which the batch does not carry")]
    MissingField { mode: String, field: &'static str },
    #[error("unknown decoder head `{0}`")]
    UnknownHead(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("utterance `{id}`: transcript needs {required} encoder frames, only {frames} available")]
    Unalignable {
        id: String,
        required: usize,
        frames: usize,
    },
    #[error("tensor `{name}`: expected dims {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Numeric(#[from] numcore::NumError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}
