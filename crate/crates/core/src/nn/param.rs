use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::Scalar;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &ArrayD<T>) {
        self.grad += g;
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param::new(self.value.mapv(|v| U::lit(v.to_f64_lossy())))
    }
}

/// Per-layer parameter gradients, in the layer's parameter order.
pub type LayerGrads<T> = Vec<ArrayD<T>>;

/// Anything that owns trainable parameters, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds a full gradient list (aligned with [`params`](Self::params)) into the accumulators.
    fn accumulate(&mut self, grads: &[ArrayD<T>]) {
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            p.accumulate(g);
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Feeds the little-endian bytes of `values` into a running digest.
pub(crate) fn hash_values<T: Scalar>(hasher: &mut Sha256, values: impl Iterator<Item = T>) {
    for v in values {
        hasher.update(v.to_f64_lossy().to_le_bytes());
    }
}
