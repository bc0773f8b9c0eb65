pub mod adaptation;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod training;

/// A batch of images laid out as `(batch, channels, height, width)`.
pub type ImageBatch<T = f32> = ndarray::Array4<T>;

pub use error::{Error, Result};
