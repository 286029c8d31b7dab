// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A token id is not below the vocabulary size.
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    /// Input longer than the model's positional table.
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// An intervention or locating coordinate lies outside the model.
    #[error("coordinate out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid intervention spec: {0}")]
    InvalidIntervention(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    /// A shape declared in a manifest or config does not match the data.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported format version {0}")]
    UnknownFormatVersion(u32),

    /// NaN or infinity in an objective, gradient or loss.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged at the given optimizer step.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("corpus error: {0}")]
    Corpus(String),

    /// Prompt construction or parsing failed.
    #[error("prompt error: {0}")]
    Prompt(String),

    /// A planted-mechanism model cannot be built for the requested config.
    #[error("planted construction infeasible: {0}")]
    Infeasible(String),

    /// Repetition locating was asked for on a split with no repetition cases.
    #[error("no repetition error in split")]
    NoRepetitionCases,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A pipeline stage ran before its inputs existed.
    #[error("missing dependency artifact from stage `{stage}`")]
    MissingDependency { stage: String },

    #[error("config hash mismatch for {path}: expected {expected}, found {found}")]
    ConfigHashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("artifact hash mismatch for {0}")]
    ArtifactHashMismatch(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
