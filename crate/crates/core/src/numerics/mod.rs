//! Low-level math shared by every other module.
//!
//! ## Layout conventions
//!
//! All tensors are row-major `f32` with explicit shapes and no implicit
//! broadcasting. Linear layers store weights as `[out_dim, in_dim]` so a
//! forward pass is a row-by-row dot product against contiguous memory.
//!
//! ## Relevance propagation
//!
//! The [`lrp`] kernels implement the epsilon-stabilized proportional-credit
//! rules used by the attribution backward pass. They are pure functions of
//! recorded forward activations; conservation bookkeeping happens in `f64`.

mod linalg;
mod lrp;
mod stats;
mod tensor;

pub use linalg::{
    gelu, gelu_derivative, linear_bwd_input, linear_bwd_weight, linear_fwd, rms_norm_stats,
    softmax_row,
};
pub use lrp::{clamp_positive, lrp_bilinear_split, lrp_linear_backward, LRP_EPS};
pub use stats::{roc_auc, solve_least_squares, spearman, LeastSquaresFit};
pub use tensor::Tensor;
