//! Rank statistics and the small least-squares solver used by the probe.

use crate::error::{Error, Result};

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            expected: format!("{} paired values", xs.len()),
            got: format!("{}", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("spearman needs at least two pairs"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::EmptyInput("spearman undefined for constant ranks"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Mann-Whitney ROC AUC with tie correction. Labels are 1 = positive class.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyInput("roc_auc needs both classes"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub weights: Vec<f64>,
    /// Set when the normal equations were rank-deficient and a ridge term
    /// (lambda = 1e-4) was added to make the solve well-posed.
    pub ridge: bool,
}

/// Solves `argmin_w |X w - y|^2` via normal equations, `X` row-major `[n, k]`.
pub fn solve_least_squares(x: &[f64], y: &[f64], n: usize, k: usize) -> Result<LeastSquaresFit> {
    if x.len() != n * k || y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_least_squares",
            expected: format!("x [{n}, {k}], y [{n}]"),
            got: format!("x has {}, y has {}", x.len(), y.len()),
        });
    }
    if n < k {
        return Err(Error::Probe(format!(
            "least squares needs at least as many samples ({n}) as features ({k})"
        )));
    }
    let mut xtx = vec![0.0f64; k * k];
    let mut xty = vec![0.0f64; k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        for a in 0..k {
            xty[a] += row[a] * y[i];
            for b in a..k {
                xtx[a * k + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a * k + b] = xtx[b * k + a];
        }
    }
    match gauss_solve(xtx.clone(), xty.clone(), k) {
        Some(weights) => Ok(LeastSquaresFit {
            weights,
            ridge: false,
        }),
        None => {
            for a in 0..k {
                xtx[a * k + a] += 1e-4;
            }
            let weights = gauss_solve(xtx, xty, k).ok_or_else(|| {
                Error::Probe("normal equations singular even with ridge".into())
            })?;
            Ok(LeastSquaresFit {
                weights,
                ridge: true,
            })
        }
    }
}

/// Gaussian elimination with partial pivoting; None when a pivot collapses.
fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, k: usize) -> Option<Vec<f64>> {
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if a[row * k + col].abs() > a[pivot * k + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * k + col].abs() < 1e-10 {
            return None;
        }
        if pivot != col {
            for c in 0..k {
                a.swap(col * k + c, pivot * k + c);
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / a[col * k + col];
        for row in col + 1..k {
            let f = a[row * k + col] * inv;
            if f == 0.0 {
                continue;
            }
            for c in col..k {
                a[row * k + c] -= f * a[col * k + c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut w = vec![0.0f64; k];
    for col in (0..k).rev() {
        let mut acc = b[col];
        for c in col + 1..k {
            acc -= a[col * k + c] * w[c];
        }
        w[col] = acc / a[col * k + col];
    }
    Some(w)
}
