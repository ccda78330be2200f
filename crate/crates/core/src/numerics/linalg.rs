//! Dense kernels for the transformer forward and backward passes.
//!
//! Weight matrices are `[out_dim, in_dim]`; activations are `[seq, dim]`.
//! All three linear kernels accumulate into their destination so callers can
//! fuse residual adds and gradient accumulation without temporaries.

/// y[s, out] += x[s, in] . w[out, in]^T
pub fn linear_fwd(y: &mut [f32], x: &[f32], w: &[f32], seq: usize, in_dim: usize, out_dim: usize) {
    debug_assert_eq!(x.len(), seq * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(y.len(), seq * out_dim);
    for i in 0..seq {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let yi = &mut y[i * out_dim..(i + 1) * out_dim];
        for (o, yo) in yi.iter_mut().enumerate() {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0f32;
            for c in 0..in_dim {
                acc += xi[c] * wo[c];
            }
            *yo += acc;
        }
    }
}

/// dx[s, in] += dy[s, out] . w[out, in]
pub fn linear_bwd_input(
    dx: &mut [f32],
    dy: &[f32],
    w: &[f32],
    seq: usize,
    in_dim: usize,
    out_dim: usize,
) {
    for i in 0..seq {
        let dyi = &dy[i * out_dim..(i + 1) * out_dim];
        let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            for c in 0..in_dim {
                dxi[c] += g * wo[c];
            }
        }
    }
}

/// dw[out, in] += dy[s, out]^T . x[s, in]
pub fn linear_bwd_weight(
    dw: &mut [f32],
    dy: &[f32],
    x: &[f32],
    seq: usize,
    in_dim: usize,
    out_dim: usize,
) {
    for i in 0..seq {
        let dyi = &dy[i * out_dim..(i + 1) * out_dim];
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        for (o, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let dwo = &mut dw[o * in_dim..(o + 1) * in_dim];
            for c in 0..in_dim {
                dwo[c] += g * xi[c];
            }
        }
    }
}

/// Numerically stable softmax over `row[..active]`; entries past `active` are
/// left untouched (the caller owns the causal mask convention).
pub fn softmax_row(row: &mut [f32], active: usize) {
    debug_assert!(active >= 1 && active <= row.len());
    let mut max = f32::NEG_INFINITY;
    for &v in &row[..active] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in &mut row[..active] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in &mut row[..active] {
        *v *= inv;
    }
}

/// Returns `1/rms(x)` with the stabilizer inside the square root.
pub fn rms_norm_stats(x: &[f32], eps: f32) -> f32 {
    let n = x.len() as f32;
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    1.0 / (ss / n + eps).sqrt()
}

/// tanh-form gaussian error linear unit.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_56; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// d gelu(x) / dx for the tanh form above.
pub fn gelu_derivative(x: f32) -> f32 {
    const C: f32 = 0.797_884_56;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044_715 * x * x)
}
