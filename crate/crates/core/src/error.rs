use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value failed validation; `path` is the dotted JSON path.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("optimizer contract violation: {0}")]
    Contract(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by a bad run configuration (CLI exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

/// Structured parse failures for the binary container formats (ZIP, NPY,
/// DEFLATE, checkpoints, Netpbm).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("bad zip signature at offset {offset}: found {found:#010x}")]
    BadZipSignature { offset: usize, found: u32 },

    #[error("unsupported zip compression method {0} (only 0 and 8 are supported)")]
    UnsupportedCompression(u16),

    #[error("unsupported zip feature: {0}")]
    UnsupportedZip(String),

    #[error("crc-32 mismatch in `{member}`: header {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch {
        member: String,
        expected: u32,
        actual: u32,
    },

    #[error("size mismatch in `{member}`: header says {expected} bytes, got {actual}")]
    SizeMismatch {
        member: String,
        expected: usize,
        actual: usize,
    },

    #[error("missing member `{0}`")]
    MissingMember(String),

    #[error("invalid deflate stream: {0}")]
    Inflate(String),

    #[error("bad npy magic")]
    BadNpyMagic,

    #[error("unsupported npy version {0}.{1} (only 1.0)")]
    UnsupportedNpyVersion(u8, u8),

    #[error("unsupported npy dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("malformed npy header: {0}")]
    NpyHeader(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("netpbm: {0}")]
    Netpbm(String),
}
