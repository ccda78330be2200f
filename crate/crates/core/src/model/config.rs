//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
    /// Weight-initialization seed.
    pub seed: u64,
    /// When false, normalization layers are the identity. Only used to build
    /// exactly linear toy models for attribution oracles.
    #[serde(default = "default_true")]
    pub use_rms_norm: bool,
    /// When false, blocks have no MLP. Same toy-model purpose as above.
    #[serde(default = "default_true")]
    pub use_mlp: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale default: 8 layers x 8 heads at width 128.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            model_dim: 128,
            mlp_dim: 256,
            vocab_size,
            max_seq_len: 160,
            norm_eps: 1e-5,
            seed: 0,
            use_rms_norm: true,
            use_mlp: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.model_dim == 0 {
            return Err(Error::InvalidConfig(
                "n_layers, n_heads and model_dim must be positive".into(),
            ));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.use_mlp && self.mlp_dim == 0 {
            return Err(Error::InvalidConfig("mlp_dim must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.n_layers || head >= self.n_heads {
            return Err(Error::HeadOutOfRange {
                layer,
                head,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }
}
