//! Decoder-only transformer: pre-norm residual blocks with RMS normalization,
//! GELU MLP, learned absolute position embeddings, untied unembedding.
//!
//! The forward pass can record a full activation trace (attention scores and
//! weights, per-head outputs, residuals) and applies [`InterventionSpec`]s
//! inline: head ablation zeroes a head's output after the softmax,
//! function-vector patches replace it at active positions, and attention
//! boosting edits pre-softmax scores at the last query row. Training is a
//! hand-written backward pass over the same architecture; checkpoints are a
//! fixed binary format that round-trips bitwise.

mod checkpoint;
mod config;
mod forward;
mod train;
mod weights;

pub use checkpoint::{
    load_checkpoint, load_tensor_bank, save_checkpoint, save_tensor_bank, TensorRecord,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{
    forward, generate, ActivePositions, BoostSpec, ForwardTrace, FvPatch, GenerateOptions,
    GenerateOutcome, Head, InterventionSpec, LayerTrace,
};
pub use train::{train, TrainExample, TrainLog, TrainLogRow, TrainOptions, TrainSet};
pub use weights::Weights;
