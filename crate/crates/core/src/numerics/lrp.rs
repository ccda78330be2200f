//! Relevance-propagation kernels.
//!
//! ## Contracts
//!
//! [`lrp_linear_backward`] redistributes relevance through `output = weight .
//! input (+ bias)` in proportion to each input's epsilon-stabilized share of
//! the output:
//!
//! ```text
//! rel_in[j] = sum_k input[j] * weight[k, j] / (output[k] + eps * sign(output[k])) * rel_out[k]
//! ```
//!
//! The returned `absorbed` term is `sum(rel_out) - sum(rel_in)`: the share
//! claimed by the bias plus the epsilon stabilizer. Callers ledger it so the
//! global audit stays exact.
//!
//! [`lrp_bilinear_split`] handles `output[k] = sum_j a[j] * b[j, k]` by giving
//! each branch half of the incoming relevance, distributed over the same
//! contribution shares. For attention this is the split between the mixing
//! weights (a) and the value vectors (b).
//!
//! Both rules are linear in `rel_out`, so scaling the seed scales every
//! relevance entry by exactly the same factor.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Denominator stabilizer. Sign-matched so near-zero outputs cannot flip the
/// direction of the credit they hand out.
pub const LRP_EPS: f32 = 1e-6;

#[inline]
fn stabilize(v: f32, eps: f32) -> f32 {
    if v < 0.0 {
        v - eps
    } else {
        v + eps
    }
}

/// Epsilon-rule backward through a linear map.
///
/// Shapes: `input [k]`, `weight [n, k]`, `output [n]`, `rel_out [n]`;
/// returns `(rel_in [k], absorbed)`. `output` is the recorded forward value,
/// so any bias the layer added is implicitly part of the denominator.
pub fn lrp_linear_backward(
    input: &Tensor,
    weight: &Tensor,
    output: &Tensor,
    rel_out: &Tensor,
    eps: f32,
) -> Result<(Tensor, f64)> {
    let k = input.len();
    let n = output.len();
    if weight.shape() != [n, k] {
        return Err(Error::ShapeMismatch {
            op: "lrp_linear_backward",
            expected: format!("weight [{n}, {k}]"),
            got: format!("{:?}", weight.shape()),
        });
    }
    if rel_out.len() != n {
        return Err(Error::ShapeMismatch {
            op: "lrp_linear_backward",
            expected: format!("rel_out [{n}]"),
            got: format!("{:?}", rel_out.shape()),
        });
    }
    let x = input.data();
    let w = weight.data();
    let mut rel_in = vec![0.0f32; k];
    for o in 0..n {
        let s = rel_out.data()[o] / stabilize(output.data()[o], eps);
        if s == 0.0 {
            continue;
        }
        let wo = &w[o * k..(o + 1) * k];
        for c in 0..k {
            rel_in[c] += x[c] * wo[c] * s;
        }
    }
    let rel_in = Tensor::new(vec![k], rel_in)?;
    let absorbed = rel_out.sum_f64() - rel_in.sum_f64();
    Ok((rel_in, absorbed))
}

/// Fifty-fifty relevance split through a bilinear contraction
/// `output[k] = sum_j a[j] * b[j, k]`.
///
/// Shapes: `a [s]`, `b [s, k]`, `output [k]`, `rel_out [k]`; returns
/// `(rel_a [s], rel_b [s, k])`. Each branch receives half of `rel_out`,
/// apportioned by the epsilon-stabilized contribution `a[j] * b[j, k]`.
pub fn lrp_bilinear_split(
    a: &Tensor,
    b: &Tensor,
    output: &Tensor,
    rel_out: &Tensor,
    eps: f32,
) -> Result<(Tensor, Tensor)> {
    let s_len = a.len();
    let k = output.len();
    if b.shape() != [s_len, k] {
        return Err(Error::ShapeMismatch {
            op: "lrp_bilinear_split",
            expected: format!("b [{s_len}, {k}]"),
            got: format!("{:?}", b.shape()),
        });
    }
    if rel_out.len() != k {
        return Err(Error::ShapeMismatch {
            op: "lrp_bilinear_split",
            expected: format!("rel_out [{k}]"),
            got: format!("{:?}", rel_out.shape()),
        });
    }
    let av = a.data();
    let bv = b.data();
    let mut rel_a = vec![0.0f32; s_len];
    let mut rel_b = vec![0.0f32; s_len * k];
    for kk in 0..k {
        let s = 0.5 * rel_out.data()[kk] / stabilize(output.data()[kk], eps);
        if s == 0.0 {
            continue;
        }
        for j in 0..s_len {
            let credit = av[j] * bv[j * k + kk] * s;
            rel_b[j * k + kk] = credit;
            rel_a[j] += credit;
        }
    }
    Ok((
        Tensor::new(vec![s_len], rel_a)?,
        Tensor::new(vec![s_len, k], rel_b)?,
    ))
}

/// Elementwise `max(x, 0)`. NaN maps to 0 so downstream sums stay defined.
pub fn clamp_positive(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(data: Vec<f32>) -> Tensor {
        Tensor::from_vec(data)
    }

    fn t2(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn scalar_chain_returns_seed() {
        // weight 2, input 3, output 6, rel_out 1 -> rel_in = 3*2/6 = 1
        let (rel_in, absorbed) = lrp_linear_backward(
            &t1(vec![3.0]),
            &t2(1, 1, vec![2.0]),
            &t1(vec![6.0]),
            &t1(vec![1.0]),
            LRP_EPS,
        )
        .unwrap();
        assert!((rel_in.data()[0] - 1.0).abs() < 1e-5);
        assert!(absorbed.abs() < 1e-5);
    }

    #[test]
    fn identity_weight_passes_relevance_through() {
        let eye = t2(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t1(vec![1.0, 2.0, 3.0]);
        let rel = t1(vec![0.5, 0.25, 0.25]);
        let (rel_in, absorbed) = lrp_linear_backward(&x, &eye, &x, &rel, LRP_EPS).unwrap();
        for (got, want) in rel_in.data().iter().zip(rel.data()) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(absorbed.abs() < 1e-6);
    }

    #[test]
    fn biased_2x2_matches_frozen_oracle() {
        // Hand-computed in f64:
        //   w = [[0.7, -0.3], [0.2, 0.5]], x = [1.5, -2.0], bias = [0.1, -0.4]
        //   output = [1.75, -1.1], rel_out = [1.0, 0.5]
        //   rel_in = [0.46363614, 0.79740199], absorbed = 0.23896187
        let w = t2(2, 2, vec![0.7, -0.3, 0.2, 0.5]);
        let x = t1(vec![1.5, -2.0]);
        let out = t1(vec![1.75, -1.1]);
        let rel = t1(vec![1.0, 0.5]);
        let (rel_in, absorbed) = lrp_linear_backward(&x, &w, &out, &rel, LRP_EPS).unwrap();
        assert!((rel_in.data()[0] - 0.463_636_14).abs() < 1e-5);
        assert!((rel_in.data()[1] - 0.797_402_0).abs() < 1e-5);
        assert!((absorbed - 0.238_961_87).abs() < 1e-5);
        // The absorbed share is the bias credit plus the epsilon crumb:
        // bias . (rel_out / stabilized_output).
        let bias_share = 0.1f64 / 1.750_001 + 0.4 * (0.5 / 1.100_001);
        assert!((absorbed - bias_share).abs() < 1e-5);
    }

    #[test]
    fn conservation_holds_on_random_unbiased_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let k = rng.gen_range(1..6);
            let x = t1((0..k).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let w = t2(n, k, (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut out = vec![0.0f32; n];
            crate::numerics::linear_fwd(&mut out, x.data(), w.data(), 1, k, n);
            if out.iter().any(|v| v.abs() < 5e-2) {
                continue; // keep denominators away from the stabilizer scale
            }
            let rel = t1((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let out = t1(out);
            let (rel_in, absorbed) = lrp_linear_backward(&x, &w, &out, &rel, LRP_EPS).unwrap();
            let lhs = rel_in.sum_f64() + absorbed;
            let rhs = rel.sum_f64();
            assert!((lhs - rhs).abs() <= 1e-9, "bookkeeping must be exact");
            // Without a bias the epsilon share is tiny relative to the seed.
            let scale = rel.data().iter().map(|v| v.abs() as f64).sum::<f64>() + 1e-12;
            assert!(
                absorbed.abs() / scale < 1e-4,
                "absorbed {absorbed} too large for unbiased map"
            );
            checked += 1;
        }
        assert!(checked > 100, "filter left too few cases: {checked}");
    }

    #[test]
    fn doubling_the_seed_doubles_relevance_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t1((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = t2(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut out = vec![0.0f32; 4];
        crate::numerics::linear_fwd(&mut out, x.data(), w.data(), 1, 5, 4);
        let out = t1(out);
        let rel = t1(vec![0.3, -0.2, 0.9, 0.1]);
        let rel2 = t1(rel.data().iter().map(|v| 2.0 * v).collect());
        let (a, _) = lrp_linear_backward(&x, &w, &out, &rel, LRP_EPS).unwrap();
        let (b, _) = lrp_linear_backward(&x, &w, &out, &rel2, LRP_EPS).unwrap();
        for (va, vb) in a.data().iter().zip(b.data()) {
            assert_eq!((2.0 * va).to_bits(), vb.to_bits());
        }
    }

    #[test]
    fn bilinear_scalar_splits_half_and_half() {
        let (rel_a, rel_b) = lrp_bilinear_split(
            &t1(vec![1.0]),
            &t2(1, 1, vec![5.0]),
            &t1(vec![5.0]),
            &t1(vec![1.0]),
            LRP_EPS,
        )
        .unwrap();
        assert!((rel_a.data()[0] - 0.5).abs() < 1e-5);
        assert!((rel_b.data()[0] - 0.5).abs() < 1e-5);
        assert_eq!(rel_a.data()[0].to_bits(), rel_b.data()[0].to_bits());
    }

    #[test]
    fn bilinear_one_hot_row_credits_single_position() {
        // a is a one-hot attention row; only position 1 may receive credit.
        let a = t1(vec![0.0, 1.0, 0.0]);
        let b = t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = t1(vec![3.0, 4.0]);
        let rel = t1(vec![0.6, 0.4]);
        let (rel_a, rel_b) = lrp_bilinear_split(&a, &b, &out, &rel, LRP_EPS).unwrap();
        assert_eq!(rel_a.data()[0], 0.0);
        assert_eq!(rel_a.data()[2], 0.0);
        assert!((rel_a.data()[1] - 0.5).abs() < 1e-5);
        assert_eq!(rel_b.at2(0, 0), 0.0);
        assert_eq!(rel_b.at2(2, 1), 0.0);
        assert!((rel_b.at2(1, 0) - 0.3).abs() < 1e-5);
        assert!((rel_b.at2(1, 1) - 0.2).abs() < 1e-5);
    }

    #[test]
    fn bilinear_conservation_on_positive_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let a = t1((0..4).map(|_| rng.gen_range(0.5..1.5)).collect());
            let b = t2(4, 4, (0..16).map(|_| rng.gen_range(0.5..1.5)).collect());
            let mut out = vec![0.0f32; 4];
            for j in 0..4 {
                for kk in 0..4 {
                    out[kk] += a.data()[j] * b.at2(j, kk);
                }
            }
            let out = t1(out);
            let rel = t1((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (rel_a, rel_b) = lrp_bilinear_split(&a, &b, &out, &rel, LRP_EPS).unwrap();
            let total = rel_a.sum_f64() + rel_b.sum_f64();
            // Each branch carries half of the seed.
            let want = rel.sum_f64();
            let scale = rel.data().iter().map(|v| v.abs() as f64).sum::<f64>() + 1e-12;
            assert!(
                (total - want).abs() / scale < 1e-4,
                "split leaked relevance: {total} vs {want}"
            );
        }
    }

    #[test]
    fn clamp_positive_basics() {
        let t = t1(vec![-1.0, 0.0, 2.0, f32::NAN]);
        let c = clamp_positive(&t);
        assert_eq!(c.data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn clamp_positive_idempotent_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = t1((0..16).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let once = clamp_positive(&x);
            let twice = clamp_positive(&once);
            for (a, b) in once.data().iter().zip(twice.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "idempotence must be bitwise");
            }
            let y = t1(x.data().iter().map(|v| v + rng.gen_range(0.0..1.0)).collect());
            let cx = clamp_positive(&x);
            let cy = clamp_positive(&y);
            for (a, b) in cx.data().iter().zip(cy.data()) {
                assert!(a <= b, "monotonicity violated: {a} > {b}");
            }
        }
    }
}
