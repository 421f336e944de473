use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by how a caller should react; [`Error::exit_code`]
/// maps them onto the process exit codes used by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("length mismatch in {context}: expected {expected}, got {actual}")]
    LengthMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("unknown stream `{0}`")]
    UnknownStream(String),

    #[error("unknown schedule kind `{0}`")]
    UnknownSchedule(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("checksum mismatch in stream `{0}`")]
    Checksum(String),

    #[error("stream shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed document: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data/schema, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::UnknownStream(_) | Error::UnknownSchedule(_) => 1,
            Error::NonFinite(_) | Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
