//! Dense tensors, seeded randomness, forward kernels, reverse-mode
//! differentiation and the finite-difference checker.

pub mod autodiff;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod resample;
mod rng;
mod tensor;

pub use autodiff::{AttentionStats, Gradients, Graph, Var};
pub use gradcheck::{finite_diff_coords, finite_diff_grad, relative_error};
pub use kernels::{conv2d_same, matmul, softmax_rows};
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;
