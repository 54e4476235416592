//! Deterministic neural-network and linear-algebra core.
//!
//! Fixed layer vocabulary (dense, conv2d, relu, flatten), reverse-mode
//! gradients over an activation tape, softmax cross-entropy and MSE
//! losses, Adam, ridge regression, and a finite-difference gradient
//! checker. Everything is 64-bit and bitwise reproducible.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod ridge;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{compare_grads_fd, grad_check, GradCheckReport, LossSpec, ProbePolicy};
pub use loss::{mse_loss, softmax, softmax_cross_entropy, softmax_cross_entropy_batch};
pub use network::{conv_out_size, Gradients, LayerSpec, Network, ParamMap, Tape};
pub use ridge::{ridge_solve, ridge_solve_with_diag, RidgeDiag};
pub use tensor::Tensor;
