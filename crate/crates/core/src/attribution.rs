//! Relevance propagation from one logit back to the input tokens, with a
//! global conservation audit.
//!
//! ## Flow
//!
//! The pass seeds at a chosen logit (its value is the total relevance) and
//! walks the recorded forward trace in reverse. Linear maps split relevance
//! by input contribution with a sign-stabilized epsilon; residual junctions
//! split per channel by branch value; norms and elementwise nonlinearities
//! pass relevance through unchanged. Each attention product `A[i,j] * v[j]`
//! is split half to the attention weight and half to the value vector: the
//! value half continues back through `W_V` into the stream, the weight half
//! is terminated into the ledger (the query/key circuit decides *where* to
//! read, not *what* flows).
//!
//! ## Bookkeeping
//!
//! Every unit of relevance ends in exactly one of: the per-token input
//! heatmap, a named ledger sink (epsilon absorption, terminated query/key
//! credit, patched heads), so `seed = sum(heatmap) + sum(ledger)` up to
//! float error. [`RelevanceTrace::audit`] checks that identity; sums are
//! accumulated in f64 while the propagation itself stays f32.
//!
//! ## Head scores
//!
//! Along the way the pass records, per head: the relevance arriving at the
//! head's output summed over positions (raw, and with each position's
//! contribution clamped at zero), and `rho[j]`, the clamped attention-weight
//! credit per source token, which localizes what the head was reading.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, InterventionSpec, Weights};
use crate::numerics::{lrp_bilinear_split, lrp_linear_backward, Tensor, LRP_EPS};

#[derive(Debug, Clone, Default)]
pub struct AttributionOptions {
    pub spec: InterventionSpec,
    /// Row whose logit is seeded; defaults to the last position.
    pub target_position: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceLedger {
    pub entries: BTreeMap<String, f64>,
}

impl RelevanceLedger {
    fn add(&mut self, name: String, amount: f64) {
        if amount != 0.0 {
            *self.entries.entry(name).or_insert(0.0) += amount;
        }
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn get(&self, name: &str) -> f64 {
        self.entries.get(name).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: f64,
    /// Heatmap total plus ledger total.
    pub recovered: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceTrace {
    pub tokens: Vec<usize>,
    pub target_token: usize,
    pub target_position: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// The target logit: all relevance that the pass distributes.
    pub seed: f64,
    /// Channel-summed relevance on the input embedding of each position.
    pub input_heatmap: Vec<f64>,
    /// Per head, positions clamped at zero before summing; `[l * n_heads + h]`.
    pub head_relevance: Vec<f64>,
    /// Per head, signed sum.
    pub head_relevance_raw: Vec<f64>,
    /// Clamped attention-weight credit per source token; `[(l, h), j]`.
    pub token_head: Vec<f64>,
    pub ledger: RelevanceLedger,
}

impl RelevanceTrace {
    fn hidx(&self, layer: usize, head: usize) -> usize {
        layer * self.n_heads + head
    }

    pub fn head_rel(&self, layer: usize, head: usize) -> f64 {
        self.head_relevance[self.hidx(layer, head)]
    }

    pub fn head_rel_raw(&self, layer: usize, head: usize) -> f64 {
        self.head_relevance_raw[self.hidx(layer, head)]
    }

    /// Source-token profile of one head.
    pub fn rho(&self, layer: usize, head: usize) -> &[f64] {
        let s = self.tokens.len();
        let base = self.hidx(layer, head) * s;
        &self.token_head[base..base + s]
    }

    /// Each head's share of the total clamped relevance; zeros if no head
    /// received positive relevance.
    pub fn normalized_head_relevance(&self) -> Vec<f64> {
        let total: f64 = self.head_relevance.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.head_relevance.len()];
        }
        self.head_relevance.iter().map(|r| r / total).collect()
    }

    pub fn audit(&self) -> AuditReport {
        let recovered: f64 = self.input_heatmap.iter().sum::<f64>() + self.ledger.total();
        let abs_gap = (self.seed - recovered).abs();
        AuditReport {
            seed: self.seed,
            recovered,
            abs_gap,
            rel_gap: abs_gap / self.seed.abs().max(1e-9),
        }
    }
}

fn sum64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

fn row_is_zero(row: &[f32]) -> bool {
    row.iter().all(|&v| v == 0.0)
}

/// Splits relevance at `y = a + b` per channel by branch value; returns the
/// two branch relevances and the epsilon-absorbed remainder.
fn residual_split(rel: &[f32], a: &[f32], b: &[f32]) -> (Vec<f32>, Vec<f32>, f64) {
    let mut rel_a = vec![0.0f32; rel.len()];
    let mut rel_b = vec![0.0f32; rel.len()];
    let mut absorbed = 0.0f64;
    for c in 0..rel.len() {
        let r = rel[c];
        if r == 0.0 {
            continue;
        }
        let y = a[c] + b[c];
        let stab = if y < 0.0 { y - LRP_EPS } else { y + LRP_EPS };
        let share = r / stab;
        rel_a[c] = a[c] * share;
        rel_b[c] = b[c] * share;
        absorbed += r as f64 - rel_a[c] as f64 - rel_b[c] as f64;
    }
    (rel_a, rel_b, absorbed)
}

/// Runs a recorded forward pass under `opts.spec` and propagates the
/// relevance of `target_token`'s logit back to the inputs.
pub fn attribute(
    weights: &Weights,
    tokens: &[usize],
    target_token: usize,
    opts: &AttributionOptions,
) -> Result<RelevanceTrace> {
    let trace = forward(weights, tokens, &opts.spec, true)?;
    attribute_trace(weights, &trace, target_token, opts)
}

/// Same as [`attribute`] for a trace that was already recorded with
/// `opts.spec`; the caller owns that consistency.
pub fn attribute_trace(
    weights: &Weights,
    trace: &ForwardTrace,
    target_token: usize,
    opts: &AttributionOptions,
) -> Result<RelevanceTrace> {
    if !trace.recorded {
        return Err(Error::EmptyInput("attribute needs a recorded trace"));
    }
    let c = &weights.config;
    let s = trace.seq_len();
    let d = c.model_dim;
    let nh = c.n_heads;
    let dh = c.head_dim();
    if target_token >= c.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: target_token,
            vocab_size: c.vocab_size,
        });
    }
    let pos = opts.target_position.unwrap_or(s - 1);
    if pos >= s {
        return Err(Error::InvalidConfig(format!(
            "target position {pos} outside sequence of {s}"
        )));
    }

    let mut ledger = RelevanceLedger::default();
    let mut head_relevance = vec![0.0f64; c.n_layers * nh];
    let mut head_relevance_raw = vec![0.0f64; c.n_layers * nh];
    let mut token_head = vec![0.0f64; c.n_layers * nh * s];

    // seed: split the target logit over the final normed row
    let logit = trace.logit(pos, target_token);
    let seed = logit as f64;
    let norm_row = Tensor::from_vec(trace.final_norm_out[pos * d..(pos + 1) * d].to_vec());
    let w_row = Tensor::new(
        vec![1, d],
        weights.unembed()[target_token * d..(target_token + 1) * d].to_vec(),
    )?;
    let (rel_row, absorbed) = lrp_linear_backward(
        &norm_row,
        &w_row,
        &Tensor::from_vec(vec![logit]),
        &Tensor::from_vec(vec![logit]),
        LRP_EPS,
    )?;
    ledger.add("unembed".into(), absorbed);

    // final norm passes through; rel lands on the top residual stream
    let mut rel_x = vec![0.0f32; s * d];
    rel_x[pos * d..(pos + 1) * d].copy_from_slice(rel_row.data());

    for l in (0..c.n_layers).rev() {
        let lt = &trace.layers[l];
        if c.use_mlp {
            let mut x_mid = lt.residual_in.clone();
            for (xv, a) in x_mid.iter_mut().zip(&lt.attn_block_out) {
                *xv += a;
            }
            let (rel_xmid, rel_mlp_out, absorbed) =
                residual_split(&rel_x, &x_mid, &lt.mlp_out);
            ledger.add(format!("residual.mlp:L{l}"), absorbed);
            rel_x = rel_xmid;
            let w2 = Tensor::new(vec![d, c.mlp_dim], weights.w2(l).to_vec())?;
            let w1 = Tensor::new(vec![c.mlp_dim, d], weights.w1(l).to_vec())?;
            for i in 0..s {
                let rmo = &rel_mlp_out[i * d..(i + 1) * d];
                if row_is_zero(rmo) {
                    continue;
                }
                let act = Tensor::from_vec(
                    lt.mlp_act[i * c.mlp_dim..(i + 1) * c.mlp_dim].to_vec(),
                );
                let out = Tensor::from_vec(lt.mlp_out[i * d..(i + 1) * d].to_vec());
                let (rel_act, abs2) = lrp_linear_backward(
                    &act,
                    &w2,
                    &out,
                    &Tensor::from_vec(rmo.to_vec()),
                    LRP_EPS,
                )?;
                ledger.add(format!("mlp.fc2:L{l}"), abs2);
                // gelu passes through: rel(h1) = rel(act)
                let n2 = Tensor::from_vec(lt.mlp_norm_out[i * d..(i + 1) * d].to_vec());
                let h1 = Tensor::from_vec(
                    lt.mlp_h1[i * c.mlp_dim..(i + 1) * c.mlp_dim].to_vec(),
                );
                let (rel_n2, abs1) = lrp_linear_backward(&n2, &w1, &h1, &rel_act, LRP_EPS)?;
                ledger.add(format!("mlp.fc1:L{l}"), abs1);
                // norm passes through onto the mid residual
                for (dst, src) in rel_x[i * d..(i + 1) * d].iter_mut().zip(rel_n2.data()) {
                    *dst += src;
                }
            }
        }

        // x_mid = residual_in + attn_block_out
        let (rel_resid, rel_attn_out, absorbed) =
            residual_split(&rel_x, &lt.residual_in, &lt.attn_block_out);
        ledger.add(format!("residual.attn:L{l}"), absorbed);
        rel_x = rel_resid;

        let mut z_cat = vec![0.0f32; s * d];
        for h in 0..nh {
            for i in 0..s {
                z_cat[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&lt.z[h * s * dh + i * dh..h * s * dh + (i + 1) * dh]);
            }
        }
        let wo = Tensor::new(vec![d, d], weights.wo(l).to_vec())?;
        let mut rel_zcat = vec![0.0f32; s * d];
        for i in 0..s {
            let rao = &rel_attn_out[i * d..(i + 1) * d];
            if row_is_zero(rao) {
                continue;
            }
            let zc = Tensor::from_vec(z_cat[i * d..(i + 1) * d].to_vec());
            let out = Tensor::from_vec(lt.attn_block_out[i * d..(i + 1) * d].to_vec());
            let (rel_z, absorbed) =
                lrp_linear_backward(&zc, &wo, &out, &Tensor::from_vec(rao.to_vec()), LRP_EPS)?;
            ledger.add(format!("attn.wo:L{l}"), absorbed);
            rel_zcat[i * d..(i + 1) * d].copy_from_slice(rel_z.data());
        }

        let mut rel_v = vec![0.0f32; nh * s * dh];
        for h in 0..nh {
            let hoff = h * dh;
            let patched = opts
                .spec
                .fv_patches
                .iter()
                .any(|p| p.layer == l && p.head == h);
            for i in 0..s {
                let rel_z_hi = &rel_zcat[i * d + hoff..i * d + hoff + dh];
                let pos_sum = sum64(rel_z_hi);
                head_relevance_raw[l * nh + h] += pos_sum;
                head_relevance[l * nh + h] += pos_sum.max(0.0);
                if row_is_zero(rel_z_hi) {
                    continue;
                }
                if patched {
                    // a patched head's output is not a function of context;
                    // its relevance terminates here
                    ledger.add(format!("patched:L{l}.h{h}"), pos_sum);
                    continue;
                }
                let arow =
                    Tensor::from_vec(lt.attn[h * s * s + i * s..h * s * s + i * s + i + 1].to_vec());
                let vrows = Tensor::new(
                    vec![i + 1, dh],
                    lt.v[h * s * dh..h * s * dh + (i + 1) * dh].to_vec(),
                )?;
                let z_hi =
                    Tensor::from_vec(lt.z[h * s * dh + i * dh..h * s * dh + (i + 1) * dh].to_vec());
                let rel_out = Tensor::from_vec(rel_z_hi.to_vec());
                let (rel_a, rel_b) = lrp_bilinear_split(&arow, &vrows, &z_hi, &rel_out, LRP_EPS)?;
                let bilinear_absorbed =
                    pos_sum - rel_a.sum_f64() - rel_b.sum_f64();
                ledger.add(format!("bilinear:L{l}.h{h}"), bilinear_absorbed);
                ledger.add(format!("qk:L{l}.h{h}"), rel_a.sum_f64());
                for (j, &ra) in rel_a.data().iter().enumerate() {
                    token_head[(l * nh + h) * s + j] += (ra as f64).max(0.0);
                }
                for j in 0..=i {
                    let dst = &mut rel_v[h * s * dh + j * dh..h * s * dh + (j + 1) * dh];
                    let src = &rel_b.data()[j * dh..(j + 1) * dh];
                    for cdim in 0..dh {
                        dst[cdim] += src[cdim];
                    }
                }
            }
        }

        for h in 0..nh {
            let wv_h = Tensor::new(vec![dh, d], weights.wv_head(l, h).to_vec())?;
            for j in 0..s {
                let rv = &rel_v[h * s * dh + j * dh..h * s * dh + (j + 1) * dh];
                if row_is_zero(rv) {
                    continue;
                }
                let n1 = Tensor::from_vec(lt.attn_norm_out[j * d..(j + 1) * d].to_vec());
                let v_hj =
                    Tensor::from_vec(lt.v[h * s * dh + j * dh..h * s * dh + (j + 1) * dh].to_vec());
                let (rel_n1, absorbed) =
                    lrp_linear_backward(&n1, &wv_h, &v_hj, &Tensor::from_vec(rv.to_vec()), LRP_EPS)?;
                ledger.add(format!("attn.wv:L{l}.h{h}"), absorbed);
                // norm passes through onto this layer's input residual
                for (dst, src) in rel_x[j * d..(j + 1) * d].iter_mut().zip(rel_n1.data()) {
                    *dst += src;
                }
            }
        }
    }

    let input_heatmap: Vec<f64> = (0..s).map(|i| sum64(&rel_x[i * d..(i + 1) * d])).collect();

    Ok(RelevanceTrace {
        tokens: trace.tokens.clone(),
        target_token,
        target_position: pos,
        n_layers: c.n_layers,
        n_heads: nh,
        seed,
        input_heatmap,
        head_relevance,
        head_relevance_raw,
        token_head,
        ledger,
    })
}
