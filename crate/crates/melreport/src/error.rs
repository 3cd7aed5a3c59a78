//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (manifest, feature file, mask, checkpoint, config).
    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    /// Structurally valid input that violates a corpus-level contract,
    /// e.g. a feature file whose dimension disagrees with the corpus.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape mismatch, always naming the offending operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: String, msg: String },

    /// Violated operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid value in a mathematical domain (non-positive resolution,
    /// window outside the mask, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("split error: {0}")]
    Split(String),

    /// Non-finite loss or gradient during optimization.
    #[error("numerical abort: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub fn shape(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
