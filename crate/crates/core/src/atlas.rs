//! Per-head score tables and head-set selection.
//!
//! ## Scores
//!
//! Aggregating relevance traces over prompt sets gives each head four
//! numbers: `r_open` (mean share of clamped relevance on open-book
//! counterfactual prompts), `r_closed` (same on closed-book prompts), the
//! difference score `d = r_open - r_closed` that sorts heads into in-context
//! (d > 0) versus parametric (d < 0) specialists, and two span shares:
//! `rho_task` (fraction of a head's attention-weight credit landing on the
//! question tokens) and `rho_ret` (fraction landing on a planted needle).
//!
//! ## Selection
//!
//! `top_heads` ranks by score with a stable `(layer, head)` tie-break so
//! equal scores never reorder between runs. [`HeadSets`] bundles the four
//! selections the intervention stages consume.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::RelevanceTrace;
use crate::error::{Error, Result};
use crate::model::Head;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub n_layers: usize,
    pub n_heads: usize,
    pub r_open: Vec<f64>,
    pub r_closed: Vec<f64>,
    pub d_score: Vec<f64>,
    pub rho_task: Vec<f64>,
    pub rho_ret: Vec<f64>,
}

fn check_traces(traces: &[RelevanceTrace], n_layers: usize, n_heads: usize) -> Result<()> {
    for t in traces {
        if t.n_layers != n_layers || t.n_heads != n_heads {
            return Err(Error::ShapeMismatch {
                op: "head score aggregation",
                expected: format!("{n_layers} layers x {n_heads} heads"),
                got: format!("{} x {}", t.n_layers, t.n_heads),
            });
        }
    }
    Ok(())
}

/// Mean of each head's normalized relevance share across traces.
pub fn mean_normalized_relevance(
    traces: &[RelevanceTrace],
    n_layers: usize,
    n_heads: usize,
) -> Result<Vec<f64>> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("mean_normalized_relevance"));
    }
    check_traces(traces, n_layers, n_heads)?;
    let mut acc = vec![0.0f64; n_layers * n_heads];
    for t in traces {
        for (a, r) in acc.iter_mut().zip(t.normalized_head_relevance()) {
            *a += r;
        }
    }
    for a in &mut acc {
        *a /= traces.len() as f64;
    }
    Ok(acc)
}

/// Per head: the fraction of its attention-weight credit that lands inside
/// `span` (half-open token range); zero for heads with no credit at all.
pub fn span_credit_share(trace: &RelevanceTrace, span: (usize, usize)) -> Result<Vec<f64>> {
    let s = trace.tokens.len();
    if span.0 >= span.1 || span.1 > s {
        return Err(Error::InvalidConfig(format!(
            "span {span:?} invalid for sequence of {s}"
        )));
    }
    let mut shares = vec![0.0f64; trace.n_layers * trace.n_heads];
    for l in 0..trace.n_layers {
        for h in 0..trace.n_heads {
            let rho = trace.rho(l, h);
            let total: f64 = rho.iter().sum();
            if total > 0.0 {
                let inside: f64 = rho[span.0..span.1].iter().sum();
                shares[l * trace.n_heads + h] = inside / total;
            }
        }
    }
    Ok(shares)
}

/// Mean of [`span_credit_share`] across (trace, span) pairs; empty input
/// yields zeros, since the spans are optional extras of a score table.
pub fn mean_span_share(
    pairs: &[(&RelevanceTrace, (usize, usize))],
    n_layers: usize,
    n_heads: usize,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; n_layers * n_heads];
    if pairs.is_empty() {
        return Ok(acc);
    }
    for (t, span) in pairs {
        if t.n_layers != n_layers || t.n_heads != n_heads {
            return Err(Error::ShapeMismatch {
                op: "mean_span_share",
                expected: format!("{n_layers} x {n_heads}"),
                got: format!("{} x {}", t.n_layers, t.n_heads),
            });
        }
        for (a, s) in acc.iter_mut().zip(span_credit_share(t, *span)?) {
            *a += s;
        }
    }
    for a in &mut acc {
        *a /= pairs.len() as f64;
    }
    Ok(acc)
}

pub fn difference_scores(r_open: &[f64], r_closed: &[f64]) -> Result<Vec<f64>> {
    if r_open.len() != r_closed.len() {
        return Err(Error::ShapeMismatch {
            op: "difference_scores",
            expected: format!("{}", r_open.len()),
            got: format!("{}", r_closed.len()),
        });
    }
    Ok(r_open.iter().zip(r_closed).map(|(o, c)| o - c).collect())
}

impl HeadScoreTable {
    pub fn build(
        n_layers: usize,
        n_heads: usize,
        open_traces: &[RelevanceTrace],
        closed_traces: &[RelevanceTrace],
        task_pairs: &[(&RelevanceTrace, (usize, usize))],
        ret_pairs: &[(&RelevanceTrace, (usize, usize))],
    ) -> Result<Self> {
        let r_open = mean_normalized_relevance(open_traces, n_layers, n_heads)?;
        let r_closed = mean_normalized_relevance(closed_traces, n_layers, n_heads)?;
        let d_score = difference_scores(&r_open, &r_closed)?;
        let rho_task = mean_span_share(task_pairs, n_layers, n_heads)?;
        let rho_ret = mean_span_share(ret_pairs, n_layers, n_heads)?;
        Ok(Self {
            n_layers,
            n_heads,
            r_open,
            r_closed,
            d_score,
            rho_task,
            rho_ret,
        })
    }

    pub fn n_total(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Mean of a score vector per layer; handy for coarse profiles.
    pub fn layerwise_profile(&self, scores: &[f64]) -> Vec<f64> {
        (0..self.n_layers)
            .map(|l| {
                scores[l * self.n_heads..(l + 1) * self.n_heads]
                    .iter()
                    .sum::<f64>()
                    / self.n_heads as f64
            })
            .collect()
    }
}

/// The `k` heads with the largest (or smallest) scores; ties break toward
/// lower `(layer, head)` so the ranking is stable across runs.
pub fn top_heads(
    scores: &[f64],
    n_heads: usize,
    k: usize,
    largest: bool,
) -> Result<Vec<Head>> {
    let total = scores.len();
    if k == 0 || k > total {
        return Err(Error::InvalidConfig(format!(
            "cannot pick {k} heads out of {total}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("head scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        let cmp = if largest {
            scores[b].partial_cmp(&scores[a]).unwrap()
        } else {
            scores[a].partial_cmp(&scores[b]).unwrap()
        };
        cmp.then(a.cmp(&b))
    });
    Ok(order[..k]
        .iter()
        .map(|&i| (i / n_heads, i % n_heads))
        .collect())
}

/// `k` heads sampled uniformly without replacement, skipping `exclude`;
/// the baseline pool for comparing against selected heads.
pub fn random_heads(
    n_layers: usize,
    n_heads: usize,
    k: usize,
    exclude: &[Head],
    seed: u64,
) -> Result<Vec<Head>> {
    let mut pool: Vec<Head> = (0..n_layers * n_heads)
        .map(|i| (i / n_heads, i % n_heads))
        .filter(|head| !exclude.contains(head))
        .collect();
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {k} heads from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(k);
    pool.sort_unstable();
    Ok(pool)
}

/// The four head selections the intervention stages act on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSets {
    pub contextual: Vec<Head>,
    pub parametric: Vec<Head>,
    pub task: Vec<Head>,
    pub retrieval: Vec<Head>,
}

impl HeadSets {
    pub fn build(
        table: &HeadScoreTable,
        k_ctx: usize,
        k_param: usize,
        k_task: usize,
        k_ret: usize,
    ) -> Result<Self> {
        Ok(Self {
            contextual: top_heads(&table.d_score, table.n_heads, k_ctx, true)?,
            parametric: top_heads(&table.d_score, table.n_heads, k_param, false)?,
            task: top_heads(&table.rho_task, table.n_heads, k_task, true)?,
            retrieval: top_heads(&table.rho_ret, table.n_heads, k_ret, true)?,
        })
    }
}
