//! Dense tensors, reverse-mode gradients, SGD, and seeded randomness.

mod gradcheck;
mod param;
mod rng;
mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use param::{sgd_step, Momentum, ParamSet, Parameter};
pub use rng::{derive_seed, mix64, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{affine_forward, relu, softmax, softmax_cross_entropy, Tensor};
