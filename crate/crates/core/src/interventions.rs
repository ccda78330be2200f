//! Building and composing interventions: head ablation, function-vector
//! extraction and patching, attention boosting.
//!
//! The mechanisms themselves live in the forward pass; this module builds
//! [`InterventionSpec`]s from head sets, extracts mean head outputs into a
//! reusable [`FvBank`], and measures simple causal effects like the logit
//! drop from ablating one head.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, load_tensor_bank, save_tensor_bank, ActivePositions, BoostSpec, FvPatch, Head,
    InterventionSpec, TensorRecord, Weights,
};

pub fn ablation_spec(heads: &[Head]) -> InterventionSpec {
    InterventionSpec {
        ablate_heads: heads.iter().copied().collect(),
        ..InterventionSpec::none()
    }
}

pub fn boost_spec(
    heads: &[Head],
    needle_positions: Vec<usize>,
    add_const: f32,
    mult_const: f32,
) -> InterventionSpec {
    InterventionSpec {
        boost: Some(BoostSpec {
            heads: heads.iter().copied().collect(),
            needle_positions,
            add_const,
            mult_const,
        }),
        ..InterventionSpec::none()
    }
}

/// Clean logit minus the logit with `head` ablated, at the last position.
/// Positive values mean the head was helping the target.
pub fn ablation_logit_drop(
    weights: &Weights,
    tokens: &[usize],
    target: usize,
    head: Head,
) -> Result<f64> {
    let clean = forward(weights, tokens, &InterventionSpec::none(), false)?;
    let ablated = forward(weights, tokens, &ablation_spec(&[head]), false)?;
    let pos = tokens.len() - 1;
    Ok(clean.logit(pos, target) as f64 - ablated.logit(pos, target) as f64)
}

/// Unions two specs. Ablations merge; patches concatenate but may not target
/// the same head twice; at most one side may carry a boost; non-default
/// active-position choices must agree.
pub fn merge_specs(a: &InterventionSpec, b: &InterventionSpec) -> Result<InterventionSpec> {
    let mut out = a.clone();
    out.ablate_heads.extend(b.ablate_heads.iter().copied());
    for p in &b.fv_patches {
        if out
            .fv_patches
            .iter()
            .any(|q| q.layer == p.layer && q.head == p.head)
        {
            return Err(Error::InvalidConfig(format!(
                "both specs patch head ({}, {})",
                p.layer, p.head
            )));
        }
        out.fv_patches.push(p.clone());
    }
    match (&a.boost, &b.boost) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig("both specs carry a boost".into()))
        }
        (None, Some(bb)) => out.boost = Some(bb.clone()),
        _ => {}
    }
    let default = ActivePositions::LastOnly;
    out.active_positions = match (a.active_positions, b.active_positions) {
        (x, y) if x == y => x,
        (x, y) if y == default => x,
        (x, y) if x == default => y,
        (x, y) => {
            return Err(Error::InvalidConfig(format!(
                "specs disagree on active positions: {x:?} vs {y:?}"
            )))
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FvBankMeta {
    kind: String,
    alpha: f32,
    head_dim: usize,
}

/// Mean head outputs at the final prompt position, keyed by head: the raw
/// material for function-vector patching.
#[derive(Debug, Clone, PartialEq)]
pub struct FvBank {
    pub kind: String,
    /// Default patch scale, chosen on held-out prompts.
    pub alpha: f32,
    pub head_dim: usize,
    pub vectors: BTreeMap<Head, Vec<f32>>,
}

impl FvBank {
    /// Averages each listed head's output vector at the last position of
    /// every prompt (run clean, recorded).
    pub fn extract(
        weights: &Weights,
        prompts: &[Vec<usize>],
        heads: &[Head],
        kind: &str,
        alpha: f32,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::EmptyInput("FvBank::extract"));
        }
        if heads.is_empty() {
            return Err(Error::EmptyInput("FvBank::extract heads"));
        }
        let dh = weights.config.head_dim();
        let mut acc: BTreeMap<Head, Vec<f64>> = heads
            .iter()
            .map(|&head| (head, vec![0.0f64; dh]))
            .collect();
        for prompt in prompts {
            let trace = forward(weights, prompt, &InterventionSpec::none(), true)?;
            let last = prompt.len() - 1;
            for &(l, h) in heads {
                weights.config.check_head(l, h)?;
                let z = trace.z_at(l, h, last, dh);
                let slot = acc.get_mut(&(l, h)).expect("head present");
                for (a, &v) in slot.iter_mut().zip(z) {
                    *a += v as f64;
                }
            }
        }
        let n = prompts.len() as f64;
        let vectors = acc
            .into_iter()
            .map(|(head, sums)| (head, sums.into_iter().map(|v| (v / n) as f32).collect()))
            .collect();
        Ok(Self {
            kind: kind.to_string(),
            alpha,
            head_dim: dh,
            vectors,
        })
    }

    /// A spec patching every vector in the bank at `alpha_override` (or the
    /// bank's stored alpha).
    pub fn patch_spec(&self, alpha_override: Option<f32>) -> InterventionSpec {
        let alpha = alpha_override.unwrap_or(self.alpha);
        InterventionSpec {
            fv_patches: self
                .vectors
                .iter()
                .map(|(&(layer, head), vector)| FvPatch {
                    layer,
                    head,
                    vector: vector.clone(),
                    alpha,
                })
                .collect(),
            ..InterventionSpec::none()
        }
    }

    pub fn heads(&self) -> Vec<Head> {
        self.vectors.keys().copied().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&FvBankMeta {
            kind: self.kind.clone(),
            alpha: self.alpha,
            head_dim: self.head_dim,
        })?;
        let records: Vec<TensorRecord> = self
            .vectors
            .iter()
            .map(|(&(l, h), v)| TensorRecord {
                name: format!("fv.L{l}.h{h}"),
                shape: vec![v.len()],
                data: v.clone(),
            })
            .collect();
        save_tensor_bank(path, &meta, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, records) = load_tensor_bank(path)?;
        let meta: FvBankMeta = serde_json::from_str(&meta)
            .map_err(|e| Error::Checkpoint(format!("bad bank meta: {e}")))?;
        let mut vectors = BTreeMap::new();
        for rec in records {
            let rest = rec.name.strip_prefix("fv.L").ok_or_else(|| {
                Error::Checkpoint(format!("unexpected tensor {} in bank", rec.name))
            })?;
            let (l, h) = rest.split_once(".h").ok_or_else(|| {
                Error::Checkpoint(format!("unexpected tensor {} in bank", rec.name))
            })?;
            let head: Head = (
                l.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad layer in {}", rec.name)))?,
                h.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad head in {}", rec.name)))?,
            );
            if rec.data.len() != meta.head_dim {
                return Err(Error::Checkpoint(format!(
                    "vector {} has {} values, meta says {}",
                    rec.name,
                    rec.data.len(),
                    meta.head_dim
                )));
            }
            vectors.insert(head, rec.data);
        }
        Ok(Self {
            kind: meta.kind,
            alpha: meta.alpha,
            head_dim: meta.head_dim,
            vectors,
        })
    }
}
