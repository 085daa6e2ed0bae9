//! fp64 tensors, a reverse-mode tape, SPD linear algebra and seeded sampling.

pub mod gradcheck;
pub mod linalg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use linalg::{cholesky, cholesky_log_det, cholesky_solve, solve_lower, Cholesky};
pub use rng::{derive_seed, mix64, sample_mvn, xavier_uniform, SeededRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    conv1d_depthwise, elu_plus_one, gelu, layer_norm, matmul, matmul_t, softmax_rows, Tensor,
    LAYER_NORM_EPS,
};
