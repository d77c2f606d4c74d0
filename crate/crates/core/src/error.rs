//! Crate-wide error type.

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A structural parameter is out of its legal range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Input data violates a precondition (bad target code, exhausted corpus, ...).
    #[error("invalid data: {0}")]
    Data(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// A `key = value` config file failed to parse or validate.
    #[error("config error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },
    /// WAV file is valid RIFF but not a format this crate decodes.
    #[error("unsupported WAV format: {0}")]
    UnsupportedWav(String),
    /// WAV file is structurally malformed.
    #[error("malformed WAV: {0}")]
    WavParse(String),
    /// WAV sample rate differs from the configured rate; no resampling is done.
    #[error("sample rate mismatch: file has {found} Hz, expected {expected} Hz")]
    RateMismatch { found: u32, expected: u32 },
    /// A training window does not fit inside its clip.
    #[error("window out of range: {0}")]
    Window(String),
    /// Checkpoint was written by an incompatible format version.
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    /// Checkpoint bytes fail the checksum or are otherwise damaged.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
