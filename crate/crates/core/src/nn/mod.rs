//! Minimal reverse-mode engine: 1-D convolutions, dense layers, rectifiers
//! and softmax, with SGD/Adam and a finite-difference gradient checker.

mod gradcheck;
mod layer;
mod network;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, TensorCheck};
pub use layer::{log_sum_exp, softmax, softmax_cross_entropy, Layer, LayerSpec};
pub use network::{Gradients, Network, Trace};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::{Scalar, Tensor};
