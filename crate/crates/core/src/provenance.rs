//! Answer-provenance probe: did the model copy from context or recall from
//! parameters, and if copied, from where?
//!
//! ## Features
//!
//! One feature per retrieval head: the head's logit-lens score toward the
//! token the model actually produced. A head's output at the answer position
//! is pushed through its own slice of the output projection, the final norm,
//! and the unembedding row of that token, so the feature reads "how hard is
//! this head writing the produced token". A linear probe (least squares over
//! exactly those scores, ridge fallback, no intercept) separates contextual
//! from parametric answers; its threshold maximizes TPR minus FPR on a
//! stratified dev split. Exactly at the threshold the call goes to
//! contextual, since copying is the behavior the probe is anchored on.
//!
//! ## Localization
//!
//! For prompts answered contextually, each retrieval head's attention row at
//! the answer position is scaled by its probe weight times its lens score
//! and the rows are summed; the predicted copy source is the argmax of that
//! aggregate over the context span. The uniform baseline averages the same
//! rows with every coefficient at one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Head, Weights};
use crate::numerics::{rms_norm_stats, roc_auc, solve_least_squares};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerSource {
    Contextual,
    Parametric,
}

/// Per-head logit lens: project the head output through its output-projection
/// columns, the final norm, and the unembedding row of `token`.
pub fn logit_lens_score(
    weights: &Weights,
    layer: usize,
    head: usize,
    z: &[f32],
    token: usize,
) -> Result<f64> {
    let c = &weights.config;
    c.check_head(layer, head)?;
    if token >= c.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab_size: c.vocab_size,
        });
    }
    let dh = c.head_dim();
    if z.len() != dh {
        return Err(Error::ShapeMismatch {
            op: "logit_lens_score",
            expected: format!("[{dh}]"),
            got: format!("[{}]", z.len()),
        });
    }
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::Probe(
            "head output is all zeros; nothing to lens".into(),
        ));
    }
    let d = c.model_dim;
    let wo_h = weights.wo_head(layer, head);
    let mut y = vec![0.0f32; d];
    for o in 0..d {
        let mut acc = 0.0f32;
        for cc in 0..dh {
            acc += wo_h[o * dh + cc] * z[cc];
        }
        y[o] = acc;
    }
    let g = weights.g_final();
    let u = &weights.unembed()[token * d..(token + 1) * d];
    let mut score = 0.0f64;
    if c.use_rms_norm {
        let inv = rms_norm_stats(&y, c.norm_eps);
        for o in 0..d {
            score += (y[o] * inv * g[o]) as f64 * u[o] as f64;
        }
    } else {
        for o in 0..d {
            score += y[o] as f64 * u[o] as f64;
        }
    }
    Ok(score)
}

/// One lens score per listed head toward `token` at `position` of a recorded
/// trace, in the order given. Silent heads contribute zero.
pub fn lens_features(
    weights: &Weights,
    trace: &ForwardTrace,
    heads: &[Head],
    position: usize,
    token: usize,
) -> Result<Vec<f64>> {
    if !trace.recorded {
        return Err(Error::Probe("lens features need a recorded trace".into()));
    }
    let dh = weights.config.head_dim();
    let mut feats = Vec::with_capacity(heads.len());
    for &(l, h) in heads {
        let z = trace.z_at(l, h, position, dh);
        if z.iter().all(|&v| v == 0.0) {
            feats.push(0.0);
            continue;
        }
        feats.push(logit_lens_score(weights, l, h, z, token)?);
    }
    Ok(feats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub features: Vec<f64>,
    /// 1 = answered from context, 0 = answered from parameters.
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub samples: Vec<ProbeSample>,
}

impl ProbeDataset {
    pub fn push(&mut self, features: Vec<f64>, label: u8) {
        self.samples.push(ProbeSample { features, label });
    }

    pub fn count(&self, label: u8) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Index split with both labels represented on both sides.
    pub fn stratified_split(
        &self,
        dev_fraction: f64,
        seed: u64,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&dev_fraction) || dev_fraction <= 0.0 {
            return Err(Error::Probe(format!(
                "dev_fraction {dev_fraction} outside (0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for label in [0u8, 1u8] {
            let mut idx: Vec<usize> = self
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == label)
                .map(|(i, _)| i)
                .collect();
            if idx.len() < 2 {
                return Err(Error::Probe(format!(
                    "label {label} has {} samples, need at least 2",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let n_dev = ((idx.len() as f64 * dev_fraction).round() as usize)
                .clamp(1, idx.len() - 1);
            dev.extend_from_slice(&idx[..n_dev]);
            train.extend_from_slice(&idx[n_dev..]);
        }
        train.sort_unstable();
        dev.sort_unstable();
        Ok((train, dev))
    }
}

/// Least-squares probe over the retrieval heads' lens scores, plus the
/// metadata a saved probe file needs to be audited: which heads, which
/// split seed, and how well it separated the dev split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Feature order; one weight per head.
    pub heads: Vec<Head>,
    pub weights: Vec<f64>,
    pub threshold: f64,
    /// ROC AUC on the dev split the threshold was chosen on.
    pub dev_auc: f64,
    pub split_seed: u64,
    /// Whether the solver had to fall back to ridge regularization.
    pub ridge: bool,
    /// TPR minus FPR at the chosen threshold on the dev split.
    pub dev_margin: f64,
}

impl Probe {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum::<f64>()
    }

    /// Exactly at the threshold the call goes to contextual.
    pub fn classify(&self, features: &[f64]) -> Result<AnswerSource> {
        if features.len() != self.weights.len() {
            return Err(Error::Probe(format!(
                "sample has {} features, probe was trained on {} heads",
                features.len(),
                self.weights.len()
            )));
        }
        Ok(if self.score(features) >= self.threshold {
            AnswerSource::Contextual
        } else {
            AnswerSource::Parametric
        })
    }
}

fn tpr_minus_fpr(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            pos += 1;
            if s >= threshold {
                tp += 1;
            }
        } else {
            neg += 1;
            if s >= threshold {
                fp += 1;
            }
        }
    }
    tp as f64 / pos.max(1) as f64 - fp as f64 / neg.max(1) as f64
}

/// Fits the probe on a stratified train split and picks the decision
/// threshold maximizing TPR minus FPR on the dev split. Every sample must
/// carry one feature per head in `heads`.
pub fn train_probe(
    dataset: &ProbeDataset,
    heads: Vec<Head>,
    dev_fraction: f64,
    seed: u64,
) -> Result<Probe> {
    let k = heads.len();
    if k == 0 {
        return Err(Error::Probe("probe needs at least one head".into()));
    }
    if dataset.samples.iter().any(|s| s.features.len() != k) {
        return Err(Error::Probe(format!(
            "every sample needs {k} features, one per head"
        )));
    }
    for label in [0u8, 1u8] {
        let n = dataset.count(label);
        if n < 20 {
            return Err(Error::Probe(format!(
                "label {label} has {n} samples, need at least 20"
            )));
        }
    }
    let (train_idx, dev_idx) = dataset.stratified_split(dev_fraction, seed)?;
    if train_idx.len() < k {
        return Err(Error::Probe(format!(
            "{} train samples cannot fit {k} probe weights",
            train_idx.len()
        )));
    }
    let mut x = Vec::with_capacity(train_idx.len() * k);
    let mut y = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        x.extend_from_slice(&dataset.samples[i].features);
        y.push(dataset.samples[i].label as f64);
    }
    let fit = solve_least_squares(&x, &y, train_idx.len(), k)?;
    let weights = fit.weights;

    let dev_scores: Vec<f64> = dev_idx
        .iter()
        .map(|&i| {
            weights
                .iter()
                .zip(&dataset.samples[i].features)
                .map(|(w, f)| w * f)
                .sum::<f64>()
        })
        .collect();
    let dev_labels: Vec<u8> = dev_idx.iter().map(|&i| dataset.samples[i].label).collect();
    let dev_auc = roc_auc(&dev_labels, &dev_scores)?;
    let mut candidates: Vec<f64> = dev_scores.clone();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.0f64);
    for &t in &candidates {
        let m = tpr_minus_fpr(&dev_scores, &dev_labels, t);
        if m > best.0 {
            best = (m, t);
        }
    }
    Ok(Probe {
        heads,
        weights,
        threshold: best.1,
        dev_auc,
        split_seed: seed,
        ridge: fit.ridge,
        dev_margin: best.0,
    })
}

pub fn probe_auc(probe: &Probe, samples: &[ProbeSample]) -> Result<f64> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = samples.iter().map(|s| probe.score(&s.features)).collect();
    roc_auc(&labels, &scores)
}

/// Aggregates the listed heads' attention rows at `position` and returns the
/// argmax over `span` plus the full aggregated map. With a probe, each row is
/// scaled by probe weight times the head's lens score toward `token`; without
/// one every coefficient is one (the uniform-average baseline, for which
/// `token` is ignored). Ties go to the earliest position.
pub fn localize_source(
    weights: &Weights,
    trace: &ForwardTrace,
    heads: &[Head],
    probe: Option<&Probe>,
    position: usize,
    token: usize,
    span: (usize, usize),
) -> Result<(usize, Vec<f64>)> {
    if !trace.recorded {
        return Err(Error::Probe("localization needs a recorded trace".into()));
    }
    let s = trace.seq_len();
    if position >= s || span.0 >= span.1 || span.1 > s {
        return Err(Error::InvalidConfig(format!(
            "position {position} / span {span:?} invalid for sequence of {s}"
        )));
    }
    if let Some(p) = probe {
        if p.heads != heads {
            return Err(Error::Probe(
                "probe was trained on a different head set".into(),
            ));
        }
    }
    let dh = weights.config.head_dim();
    let mut map = vec![0.0f64; s];
    for (i, &(l, h)) in heads.iter().enumerate() {
        let coeff = match probe {
            None => 1.0,
            Some(p) => {
                let z = trace.z_at(l, h, position, dh);
                if z.iter().all(|&v| v == 0.0) {
                    continue;
                }
                p.weights[i] * logit_lens_score(weights, l, h, z, token)?
            }
        };
        if coeff == 0.0 {
            continue;
        }
        let row = trace.attn_row(l, h, position);
        for (slot, &a) in map.iter_mut().zip(row) {
            *slot += coeff * a as f64;
        }
    }
    let mut best = span.0;
    for j in span.0..span.1 {
        if map[j] > map[best] {
            best = j;
        }
    }
    Ok((best, map))
}
