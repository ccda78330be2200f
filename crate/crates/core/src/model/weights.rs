//! Parameter storage: one flat buffer plus a named-tensor layout.
//!
//! Keeping every parameter in a single `Vec<f32>` makes the optimizer a plain
//! loop, gradient clipping a single norm, and checkpointing a walk over the
//! layout table. Accessors hand out slices by (name, offset, shape).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    layout: Vec<TensorSpec>,
    data: Vec<f32>,
}

pub(crate) fn build_layout(c: &ModelConfig) -> Vec<TensorSpec> {
    let d = c.model_dim;
    let mut layout = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        layout.push(TensorSpec {
            name,
            offset,
            shape,
        });
        offset += len;
    };
    push("tok_emb".into(), vec![c.vocab_size, d]);
    push("pos_emb".into(), vec![c.max_seq_len, d]);
    for l in 0..c.n_layers {
        push(format!("layer{l}.attn.wq"), vec![d, d]);
        push(format!("layer{l}.attn.wk"), vec![d, d]);
        push(format!("layer{l}.attn.wv"), vec![d, d]);
        push(format!("layer{l}.attn.wo"), vec![d, d]);
        push(format!("layer{l}.attn_norm.g"), vec![d]);
        push(format!("layer{l}.mlp.w1"), vec![c.mlp_dim, d]);
        push(format!("layer{l}.mlp.w2"), vec![d, c.mlp_dim]);
        push(format!("layer{l}.mlp_norm.g"), vec![d]);
    }
    push("final_norm.g".into(), vec![d]);
    push("unembed.w".into(), vec![c.vocab_size, d]);
    layout
}

impl Weights {
    /// Seeded initialization: embeddings and projections at sigma = 0.02,
    /// residual-writing projections (wo, w2) shrunk by 1/sqrt(2 * n_layers),
    /// norm gains at one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(config);
        let total: usize = layout.iter().map(|t| t.len()).sum();
        let mut data = vec![0.0f32; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_scale = 1.0 / ((2 * config.n_layers) as f32).sqrt();
        for spec in &layout {
            let sigma = if spec.name.ends_with("norm.g") {
                // gains start at identity
                for v in &mut data[spec.offset..spec.offset + spec.len()] {
                    *v = 1.0;
                }
                continue;
            } else if spec.name.ends_with(".wo") || spec.name.ends_with(".w2") {
                0.02 * residual_scale
            } else {
                0.02
            };
            for v in &mut data[spec.offset..spec.offset + spec.len()] {
                let n: f32 = StandardNormal.sample(&mut rng);
                *v = n * sigma;
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_parts(config: ModelConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let total: usize = layout.iter().map(|t| t.len()).sum();
        if data.len() != total {
            return Err(Error::Checkpoint(format!(
                "parameter buffer has {} values, layout needs {total}",
                data.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f32] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn slice(&self, name: &str) -> &[f32] {
        let spec = self
            .layout
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        &self.data[spec.offset..spec.offset + spec.len()]
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.layout.iter().find(|t| t.name == name)
    }

    pub fn tok_emb(&self) -> &[f32] {
        self.slice("tok_emb")
    }

    pub fn pos_emb(&self) -> &[f32] {
        self.slice("pos_emb")
    }

    pub fn unembed(&self) -> &[f32] {
        self.slice("unembed.w")
    }

    pub fn g_final(&self) -> &[f32] {
        self.slice("final_norm.g")
    }

    pub fn wq(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.attn.wq"))
    }

    pub fn wk(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.attn.wk"))
    }

    pub fn wv(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.attn.wv"))
    }

    pub fn wo(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.attn.wo"))
    }

    pub fn g_attn(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.attn_norm.g"))
    }

    pub fn g_mlp(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.mlp_norm.g"))
    }

    pub fn w1(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.mlp.w1"))
    }

    pub fn w2(&self, layer: usize) -> &[f32] {
        self.slice(&format!("layer{layer}.mlp.w2"))
    }

    /// Rows of wv belonging to one head: a contiguous `[head_dim, model_dim]`
    /// block mapping the normed residual to that head's value vectors.
    pub fn wv_head(&self, layer: usize, head: usize) -> &[f32] {
        let d = self.config.model_dim;
        let dh = self.config.head_dim();
        let wv = self.wv(layer);
        &wv[head * dh * d..(head + 1) * dh * d]
    }

    /// Columns of wo belonging to one head, gathered into an owned
    /// `[model_dim, head_dim]` matrix: the per-head output projection.
    pub fn wo_head(&self, layer: usize, head: usize) -> Vec<f32> {
        let d = self.config.model_dim;
        let dh = self.config.head_dim();
        let wo = self.wo(layer);
        let mut out = vec![0.0f32; d * dh];
        for o in 0..d {
            let src = &wo[o * d + head * dh..o * d + (head + 1) * dh];
            out[o * dh..(o + 1) * dh].copy_from_slice(src);
        }
        out
    }
}
