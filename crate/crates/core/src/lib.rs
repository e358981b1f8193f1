//! Toy-scale diffusion training with flatness-seeking optimizers, loss
//! landscape probes and robustness measurements.

pub mod diffusion;
pub mod error;
pub mod flatness;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod robustness;

pub use error::{Error, Result};
