//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Numerical
//! misbehavior (NaN/Inf), shape mismatches, cache misuse, and malformed
//! external files are all distinct variants so callers can report the
//! offending input precisely.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration or argument value is out of its documented range.
    #[error("invalid {name}: {detail}")]
    InvalidParam { name: &'static str, detail: String },

    /// An operation produced (or was handed) a NaN or infinity.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// An attention mask blocked every key for some query row.
    #[error("attention row {row} is fully masked")]
    FullyMasked { row: usize },

    /// The KV cache cannot grow past its configured capacity.
    #[error("kv cache overflow: need {needed} positions, capacity {capacity}")]
    CacheOverflow { needed: usize, capacity: usize },

    /// A cache operation was called with inconsistent lengths.
    #[error("kv cache misuse: {0}")]
    Cache(String),

    /// A loss was requested over zero contributing positions.
    #[error("loss over empty target set in {0}")]
    EmptyLoss(&'static str),

    /// Token id outside the model's vocabulary.
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenRange { id: usize, vocab: usize },

    /// Corpus/model vocabulary disagreement.
    #[error("vocab mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    /// Malformed corpus file.
    #[error("corpus format: {0}")]
    CorpusFormat(String),

    /// Malformed chip-spec file.
    #[error("chip spec: {0}")]
    ChipSpec(String),

    /// Malformed or inconsistent checkpoint.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
