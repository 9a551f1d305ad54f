use std::path::PathBuf;

use thiserror::Error;

use crate::capture::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A vector whose norm is at or below the degeneracy threshold.
    #[error("degenerate vector: norm {norm:e} is at or below {threshold:e}")]
    DegenerateVector { norm: f64, threshold: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("unsupported bundle format version {0:?}")]
    UnsupportedVersion(String),

    #[error("blob {blob}: expected {expected} bytes, found {actual}")]
    BlobShapeMismatch {
        blob: String,
        expected: u64,
        actual: u64,
    },

    #[error("invalid bundle: {}", fmt_violations(.0))]
    InvalidBundle(Vec<Violation>),

    #[error("unknown trace label {0:?}")]
    MissingTrace(String),

    #[error("trace {0:?} has no edited-token embedding")]
    MissingEmbedding(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("could not parse LLM reply: {0}")]
    EmptyParse(String),

    #[error("no usable counterfactual pairs")]
    NoUsablePairs,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn fmt_violations(v: &[Violation]) -> String {
    let shown: Vec<String> = v.iter().take(5).map(ToString::to_string).collect();
    let mut s = shown.join("; ");
    if v.len() > 5 {
        s.push_str(&format!("; ... ({} total)", v.len()));
    }
    s
}
