use std::io;

use thiserror::Error;

/// Errors surfaced by every layer of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("cadence error for detector {detector_id}: gap of {gap_secs} s between {before} and {after}")]
    Cadence {
        detector_id: String,
        before: String,
        after: String,
        gap_secs: i64,
    },

    #[error("numerical error in layer {layer} at step {step}: non-finite activation")]
    Numerical { layer: usize, step: usize },

    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("handshake error: {0}")]
    Handshake(String),

    #[error("connectivity error: {0}")]
    Connectivity(String),

    #[error("detector {detector_id}: {source}")]
    Detector {
        detector_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Attach the offending detector to an error.
    pub fn for_detector(self, detector_id: &str) -> Self {
        Error::Detector {
            detector_id: detector_id.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping detector context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Detector { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
