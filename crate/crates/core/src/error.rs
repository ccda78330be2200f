//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {op} at index {index}: {value}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f32,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("head ({layer},{head}) out of range for {n_layers} layers x {n_heads} heads")]
    HeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("unknown word not in closed vocabulary: {0:?}")]
    UnknownWord(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("missing artifact {path}: run `headatlas {producer}` first")]
    MissingArtifact { path: String, producer: &'static str },

    #[error("config hash mismatch for {path}: artifact was produced by config {found}, current config is {expected}; refusing silent reuse")]
    LineageMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
