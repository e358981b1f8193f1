//! Deterministic tensors, parameter vectors, seeded randomness and
//! reverse-mode gradients for the small MLPs used throughout the crate.

pub mod autodiff;
pub mod gradcheck;
mod param;
mod rng;
mod tensor;

pub use autodiff::{grad, Activation, Graph, Mat, NodeId};
pub use gradcheck::{check_gradient, GradCheckReport};
pub use param::{param_axpy, Layout, ParamAccumulator, ParamVector, Segment};
pub use rng::Rng;
pub use tensor::Tensor;

/// Samples i.i.d. standard normal entries.
pub fn gaussian_sample(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    rng.gaussian(shape)
}
