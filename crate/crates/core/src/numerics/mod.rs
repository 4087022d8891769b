//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradReport};
pub use ops::{conv1d_time, elu, leaky_relu, matmul, maxpool1d, softmax_rows};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, SelectionLog, Tape, Var};
pub use tensor::Tensor;
