use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::Scalar;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for conv and linear layers.
pub fn uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(rng.gen_range(-bound..bound)))
}
