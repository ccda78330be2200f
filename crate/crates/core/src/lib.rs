//! headatlas: a desk-scale workbench for attention-head attribution and steering.
//!
//! The crate trains a small decoder-only transformer on a synthetic biography
//! corpus, attributes its predictions back to individual attention heads with
//! conservation-audited relevance propagation, sorts heads into in-context
//! versus parametric specialists, and then intervenes on those heads (ablation,
//! function-vector patching, attention boosting) to test the sorting causally.
//!
//! Module map:
//! - [`numerics`]: tensors, matmul kernels, relevance-propagation primitives
//! - [`corpus`]: synthetic biography/QA generation, tokenizer, answer scoring
//! - [`model`]: transformer forward/trace/generate/train and checkpoint i/o
//! - [`attribution`]: relevance backward pass with a global conservation audit
//! - [`atlas`]: per-head score tables, difference scores, head selection
//! - [`interventions`]: ablation, function vectors, attention boosting
//! - [`provenance`]: logit-lens probe classifying contextual vs parametric answers
//! - [`report`]: SVG/HTML/CSV artifact emission
//! - [`pipeline`]: run configuration, artifact lineage, stage orchestration

pub mod atlas;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod provenance;
pub mod report;

pub use error::{Error, Result};
