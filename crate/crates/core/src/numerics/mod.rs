//! Dense tensors, a reverse-mode autodiff graph, and finite-difference checks.

mod graph;
mod gradcheck;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheck, FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Scalar, Tensor};

/// RMS normalization epsilon used throughout the model.
pub const RMS_EPS: f64 = 1e-6;

/// Names of the differentiable primitives exposed by [`Graph`].
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "matmul",
        "transpose",
        "add",
        "mul",
        "scale",
        "softmax_rows",
        "rms_norm",
        "silu",
        "slice_cols",
        "select_rows",
        "concat_cols",
        "concat_rows",
        "mean",
        "sum",
        "l2_normalize_rows",
        "mse",
        "cross_entropy",
        "rope",
    ]
}
