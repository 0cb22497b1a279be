use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unmatched instance: ground truth has no visible keypoints")]
    UnmatchedInstance,

    #[error("no ground truth")]
    NoGroundTruth,

    #[error("no centers")]
    NoCenters,

    #[error("missing forward cache")]
    MissingCache,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
