//! Minimal layer library with explicit forward/backward passes.
//!
//! Every layer is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod conv;
pub mod init;
pub mod layers;
pub mod norm;
pub mod optim;
mod param;
mod scalar;

pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::Linear;
pub use norm::{BatchNorm2d, InstanceNorm2d};
pub use optim::{clip_grad_norm, Adam, Optimizer, Sgd};
pub(crate) use param::hash_values;
pub use param::{LayerGrads, Param, Parameters};
pub use scalar::Scalar;
