//! Dense `f64` tensors and a reverse-mode automatic differentiation tape.
//!
//! Every trainable quantity in the avatar pipeline flows through a [`Tape`].
//! Built-in primitives cover the glue math (matmul, softmax, attention, ...);
//! heavier domain kernels implement [`Op`] directly with hand-written
//! vector-Jacobian products and are validated with [`grad_check`].

mod attention;
mod error;
pub mod flops;
pub mod geometry;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use attention::Attention;
pub use error::{expect_shape, OpError, Result, TensorError};
pub use geometry::{quat_to_rotmat, Mat3, Quaternion, Vec3};
pub use gradcheck::{check_leaf, grad_check, GradCheckReport};
pub use ops::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softplus, softplus_inverse, Binary, Unary};
pub use tape::{BackwardCtx, Forward, Gradients, Op, Saved, Tape, Var};
pub use tensor::Tensor;
