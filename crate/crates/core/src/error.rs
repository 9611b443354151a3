use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite coordinate at frame {frame}, marker {marker}")]
    NonFinite { frame: usize, marker: String },

    #[error("frame {frame}: expected {expected} markers, found {found}")]
    InconsistentMarkers {
        frame: usize,
        expected: usize,
        found: usize,
    },

    #[error("unknown marker `{0}`")]
    UnknownMarker(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("degenerate link {link} ({parent}->{child}) at frame {frame}: {reason}")]
    DegenerateLink {
        frame: usize,
        link: usize,
        parent: String,
        child: String,
        reason: String,
    },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::NonFinite { .. } => "non_finite",
            Error::InconsistentMarkers { .. } => "inconsistent_markers",
            Error::UnknownMarker(_) => "unknown_marker",
            Error::InvalidSequence(_) => "invalid_sequence",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::DegenerateLink { .. } => "degenerate_link",
            Error::InvalidChain(_) => "invalid_chain",
            Error::Corrupt(_) => "corrupt",
            Error::Version { .. } => "version",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
