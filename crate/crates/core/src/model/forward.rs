//! Forward pass with activation tracing, interventions, and greedy decoding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::Weights;
use crate::numerics::{gelu, linear_fwd, rms_norm_stats, softmax_row};

/// `(layer, head)` coordinates, zero-based.
pub type Head = (usize, usize);

/// Replaces one head's output with `alpha * vector` at active positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvPatch {
    pub layer: usize,
    pub head: usize,
    pub vector: Vec<f32>,
    pub alpha: f32,
}

/// Pre-softmax score edit at active query rows: for every listed head and
/// every needle position `j`, `score[j] = (score[j] + add_const) * mult_const`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostSpec {
    pub heads: BTreeSet<Head>,
    pub needle_positions: Vec<usize>,
    pub add_const: f32,
    pub mult_const: f32,
}

/// Which query positions patches and boosts touch. Head ablation always
/// applies everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivePositions {
    /// The last position of the sequence being forwarded.
    LastOnly,
    /// Every position at or past the index; [`generate`] rewrites `LastOnly`
    /// to `FromIndex(prompt_len - 1)` so a patch follows the written answer.
    FromIndex(usize),
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub ablate_heads: BTreeSet<Head>,
    pub fv_patches: Vec<FvPatch>,
    pub boost: Option<BoostSpec>,
    pub active_positions: ActivePositions,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self {
            ablate_heads: BTreeSet::new(),
            fv_patches: Vec::new(),
            boost: None,
            active_positions: ActivePositions::LastOnly,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ablate_heads.is_empty() && self.fv_patches.is_empty() && self.boost.is_none()
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        for &(l, h) in &self.ablate_heads {
            config.check_head(l, h)?;
        }
        for p in &self.fv_patches {
            config.check_head(p.layer, p.head)?;
            if p.vector.len() != config.head_dim() {
                return Err(Error::ShapeMismatch {
                    op: "InterventionSpec",
                    expected: format!("patch vector of head_dim {}", config.head_dim()),
                    got: format!("{}", p.vector.len()),
                });
            }
            if !p.alpha.is_finite() {
                return Err(Error::InvalidConfig("patch alpha must be finite".into()));
            }
        }
        if let Some(b) = &self.boost {
            for &(l, h) in &b.heads {
                config.check_head(l, h)?;
            }
            if !b.add_const.is_finite() || !b.mult_const.is_finite() {
                return Err(Error::InvalidConfig("boost constants must be finite".into()));
            }
            for &p in &b.needle_positions {
                if p >= seq_len {
                    return Err(Error::InvalidConfig(format!(
                        "boost needle position {p} outside sequence of {seq_len}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn position_active(&self, pos: usize, seq_len: usize) -> bool {
        match self.active_positions {
            ActivePositions::LastOnly => pos + 1 == seq_len,
            ActivePositions::FromIndex(i) => pos >= i,
            ActivePositions::All => true,
        }
    }
}

/// Per-layer recorded activations. Attention matrices are `[n_heads, s, s]`
/// row-major with entries above the causal diagonal left at zero; `scores`
/// are pre-softmax values after any boost edits (what the softmax saw).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub residual_in: Vec<f32>,   // [s, d]
    pub attn_norm_out: Vec<f32>, // [s, d]
    pub scores: Vec<f32>,        // [h, s, s]
    pub attn: Vec<f32>,          // [h, s, s]
    pub v: Vec<f32>,             // [h, s, head_dim]
    pub z: Vec<f32>,             // [h, s, head_dim], post-intervention
    pub attn_block_out: Vec<f32>, // [s, d]
    pub mlp_norm_out: Vec<f32>,  // [s, d] (empty when the block has no MLP)
    pub mlp_h1: Vec<f32>,        // [s, mlp_dim]
    pub mlp_act: Vec<f32>,       // [s, mlp_dim]
    pub mlp_out: Vec<f32>,       // [s, d]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// Empty unless the pass was recorded.
    pub layers: Vec<LayerTrace>,
    pub final_residual: Vec<f32>, // [s, d]
    pub final_norm_out: Vec<f32>, // [s, d]
    pub logits: Vec<f32>,         // [s, vocab]
    pub recorded: bool,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn logit(&self, position: usize, token: usize) -> f32 {
        let v = self.logits.len() / self.tokens.len();
        self.logits[position * v + token]
    }

    /// Head output vector z at (layer, head, position).
    pub fn z_at(&self, layer: usize, head: usize, position: usize, head_dim: usize) -> &[f32] {
        let s = self.seq_len();
        let base = head * s * head_dim + position * head_dim;
        &self.layers[layer].z[base..base + head_dim]
    }

    /// One attention row `A[head][row, ..=row]` of a recorded layer.
    pub fn attn_row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let s = self.seq_len();
        let base = head * s * s + row * s;
        &self.layers[layer].attn[base..base + s]
    }
}

pub(crate) fn apply_norm(x: &[f32], gain: &[f32], config: &ModelConfig, out: &mut [f32]) {
    let d = config.model_dim;
    let s = x.len() / d;
    if !config.use_rms_norm {
        out.copy_from_slice(x);
        return;
    }
    for i in 0..s {
        let row = &x[i * d..(i + 1) * d];
        let inv = rms_norm_stats(row, config.norm_eps);
        let orow = &mut out[i * d..(i + 1) * d];
        for c in 0..d {
            orow[c] = row[c] * inv * gain[c];
        }
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("forward"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    for &t in tokens {
        if t >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab_size: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Runs the model over `tokens` with `spec` applied. With `record` the trace
/// carries every per-layer activation the attribution pass needs; without it
/// only the logits are kept.
pub fn forward(
    weights: &Weights,
    tokens: &[usize],
    spec: &InterventionSpec,
    record: bool,
) -> Result<ForwardTrace> {
    let config = &weights.config;
    check_tokens(config, tokens)?;
    spec.validate(config, tokens.len())?;
    let s = tokens.len();
    let d = config.model_dim;
    let nh = config.n_heads;
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f32).sqrt();

    let mut x = vec![0.0f32; s * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &weights.tok_emb()[tok * d..(tok + 1) * d];
        let pe = &weights.pos_emb()[i * d..(i + 1) * d];
        for c in 0..d {
            x[i * d + c] = te[c] + pe[c];
        }
    }

    let mut layers = Vec::with_capacity(if record { config.n_layers } else { 0 });
    let mut norm_out = vec![0.0f32; s * d];
    for l in 0..config.n_layers {
        apply_norm(&x, weights.g_attn(l), config, &mut norm_out);
        let mut q = vec![0.0f32; s * d];
        let mut k = vec![0.0f32; s * d];
        let mut v = vec![0.0f32; s * d];
        linear_fwd(&mut q, &norm_out, weights.wq(l), s, d, d);
        linear_fwd(&mut k, &norm_out, weights.wk(l), s, d, d);
        linear_fwd(&mut v, &norm_out, weights.wv(l), s, d, d);

        let mut scores = vec![0.0f32; nh * s * s];
        let mut attn = vec![0.0f32; nh * s * s];
        let mut v_heads = vec![0.0f32; nh * s * dh];
        let mut z = vec![0.0f32; nh * s * dh];
        for h in 0..nh {
            let hoff = h * dh;
            for i in 0..s {
                v_heads[h * s * dh + i * dh..h * s * dh + (i + 1) * dh]
                    .copy_from_slice(&v[i * d + hoff..i * d + hoff + dh]);
            }
            let boosted = spec.boost.as_ref().filter(|b| b.heads.contains(&(l, h)));
            for i in 0..s {
                let qi = &q[i * d + hoff..i * d + hoff + dh];
                let row = &mut scores[h * s * s + i * s..h * s * s + i * s + s];
                for j in 0..=i {
                    let kj = &k[j * d + hoff..j * d + hoff + dh];
                    let mut dot = 0.0f32;
                    for c in 0..dh {
                        dot += qi[c] * kj[c];
                    }
                    row[j] = dot * inv_sqrt;
                }
                if let Some(b) = boosted {
                    if spec.position_active(i, s) {
                        for &p in &b.needle_positions {
                            if p <= i {
                                row[p] += b.add_const;
                            }
                        }
                        for &p in &b.needle_positions {
                            if p <= i {
                                row[p] *= b.mult_const;
                            }
                        }
                    }
                }
                let arow = &mut attn[h * s * s + i * s..h * s * s + i * s + s];
                arow[..=i].copy_from_slice(&row[..=i]);
                softmax_row(arow, i + 1);
            }
            let ablated = spec.ablate_heads.contains(&(l, h));
            if !ablated {
                for i in 0..s {
                    let arow = &attn[h * s * s + i * s..h * s * s + i * s + s];
                    let zi = &mut z[h * s * dh + i * dh..h * s * dh + (i + 1) * dh];
                    for j in 0..=i {
                        let a = arow[j];
                        if a == 0.0 {
                            continue;
                        }
                        let vj = &v_heads[h * s * dh + j * dh..h * s * dh + (j + 1) * dh];
                        for c in 0..dh {
                            zi[c] += a * vj[c];
                        }
                    }
                }
                for patch in &spec.fv_patches {
                    if patch.layer == l && patch.head == h {
                        for i in 0..s {
                            if spec.position_active(i, s) {
                                let zi =
                                    &mut z[h * s * dh + i * dh..h * s * dh + (i + 1) * dh];
                                for c in 0..dh {
                                    zi[c] = patch.alpha * patch.vector[c];
                                }
                            }
                        }
                    }
                }
            }
        }

        // concat heads back to [s, d] and project
        let mut z_cat = vec![0.0f32; s * d];
        for h in 0..nh {
            for i in 0..s {
                z_cat[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&z[h * s * dh + i * dh..h * s * dh + (i + 1) * dh]);
            }
        }
        let mut attn_block_out = vec![0.0f32; s * d];
        linear_fwd(&mut attn_block_out, &z_cat, weights.wo(l), s, d, d);

        let mut x_mid = x.clone();
        for (xm, ao) in x_mid.iter_mut().zip(&attn_block_out) {
            *xm += ao;
        }

        let (mlp_norm_out, mlp_h1, mlp_act, mlp_out, x_next) = if config.use_mlp {
            let mut n2 = vec![0.0f32; s * d];
            apply_norm(&x_mid, weights.g_mlp(l), config, &mut n2);
            let mut h1 = vec![0.0f32; s * config.mlp_dim];
            linear_fwd(&mut h1, &n2, weights.w1(l), s, d, config.mlp_dim);
            let act: Vec<f32> = h1.iter().map(|&u| gelu(u)).collect();
            let mut mo = vec![0.0f32; s * d];
            linear_fwd(&mut mo, &act, weights.w2(l), s, config.mlp_dim, d);
            let mut xn = x_mid.clone();
            for (xv, m) in xn.iter_mut().zip(&mo) {
                *xv += m;
            }
            (n2, h1, act, mo, xn)
        } else {
            (
                Vec::new(),
                Vec::new(),
                Vec::new(),
                Vec::new(),
                x_mid.clone(),
            )
        };

        if record {
            layers.push(LayerTrace {
                residual_in: std::mem::take(&mut x),
                attn_norm_out: norm_out.clone(),
                scores,
                attn,
                v: v_heads,
                z,
                attn_block_out,
                mlp_norm_out,
                mlp_h1,
                mlp_act,
                mlp_out,
            });
        }
        x = x_next;
    }

    let mut final_norm_out = vec![0.0f32; s * d];
    apply_norm(&x, weights.g_final(), config, &mut final_norm_out);
    let mut logits = vec![0.0f32; s * config.vocab_size];
    linear_fwd(
        &mut logits,
        &final_norm_out,
        weights.unembed(),
        s,
        d,
        config.vocab_size,
    );
    for (index, &value) in logits.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "forward logits",
                index,
                value,
            });
        }
    }
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        layers,
        final_residual: x,
        final_norm_out,
        logits,
        recorded: record,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub spec: InterventionSpec,
    pub eos_token: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 20,
            spec: InterventionSpec::none(),
            eos_token: crate::corpus::TOK_EOS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutcome {
    /// Generated tokens, EOS excluded.
    pub generated: Vec<usize>,
    pub stopped_on_eos: bool,
}

/// Greedy decoding. A `LastOnly` intervention is promoted to
/// `FromIndex(prompt_len - 1)` so patches and boosts stay active on the final
/// prompt token and every generated position; prompts already ending in EOS
/// generate nothing.
pub fn generate(
    weights: &Weights,
    prompt: &[usize],
    opts: &GenerateOptions,
) -> Result<GenerateOutcome> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("generate"));
    }
    if prompt.last() == Some(&opts.eos_token) {
        return Ok(GenerateOutcome {
            generated: Vec::new(),
            stopped_on_eos: true,
        });
    }
    let mut spec = opts.spec.clone();
    if spec.active_positions == ActivePositions::LastOnly {
        spec.active_positions = ActivePositions::FromIndex(prompt.len() - 1);
    }
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    let mut stopped_on_eos = false;
    for _ in 0..opts.max_new_tokens {
        if tokens.len() >= weights.config.max_seq_len {
            break;
        }
        let trace = forward(weights, &tokens, &spec, false)?;
        let v = weights.config.vocab_size;
        let row = &trace.logits[(tokens.len() - 1) * v..tokens.len() * v];
        let mut best = 0usize;
        for (t, &val) in row.iter().enumerate() {
            if val > row[best] {
                best = t;
            }
        }
        if best == opts.eos_token {
            stopped_on_eos = true;
            break;
        }
        tokens.push(best);
        generated.push(best);
    }
    Ok(GenerateOutcome {
        generated,
        stopped_on_eos,
    })
}
