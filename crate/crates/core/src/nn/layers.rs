//! Parameter-free layers, the linear head, and softmax utilities.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use super::{init, LayerGrads, Param, Scalar};
use crate::error::{ensure, Result};

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the layer's *output*.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    dx
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    in_dim: (usize, usize, usize, usize),
    argmax: Vec<usize>,
}

pub fn max_pool2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    (
        Array4::from_shape_vec((b, c, oh, ow), out).expect("pool shape"),
        MaxPoolCache {
            in_dim: (b, c, h, w),
            argmax,
        },
    )
}

pub fn max_pool2_backward<T: Scalar>(cache: &MaxPoolCache, dy: &Array4<T>) -> Array4<T> {
    let mut dx = Array4::zeros(cache.in_dim);
    let d = dx.as_slice_mut().expect("fresh array");
    for (&i, &g) in cache.argmax.iter().zip(dy.iter()) {
        d[i] += g;
    }
    dx
}

/// Mean over the spatial dimensions: `(B, C, H, W)` -> `(B, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    let n = T::from_usize(h * w).expect("count");
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / n)
}

pub fn global_avg_pool_backward<T: Scalar>(
    dy: &Array2<T>,
    dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c, h, w) = dims;
    let n = T::from_usize(h * w).expect("count");
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dy[[bi, ci]] / n)
}

/// Affine map `y = x W^T + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(init::uniform(&[outputs, inputs], inputs, rng)),
            bias: Param::new(init::uniform(&[outputs], inputs, rng)),
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("2-d weight")
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        ensure!(
            x.ncols() == self.inputs(),
            "linear layer expects {} features, got {}",
            self.inputs(),
            x.ncols()
        );
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias");
        Ok(x.dot(&self.w().t()) + b)
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        param_grads: bool,
    ) -> (Array2<T>, Option<LayerGrads<T>>) {
        let grads =
            param_grads.then(|| vec![dy.t().dot(x).into_dyn(), dy.sum_axis(Axis(0)).into_dyn()]);
        (dy.dot(&self.w()), grads)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_backward<T: Scalar>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((mut out, pr), gr) in dz.outer_iter_mut().zip(p.outer_iter()).zip(dp.outer_iter()) {
        let dot = pr.dot(&gr);
        for ((o, &pv), &gv) in out.iter_mut().zip(pr.iter()).zip(gr.iter()) {
            *o = pv * (gv - dot);
        }
    }
    dz
}

/// Mean cross-entropy of `logits` against integer `labels`, and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    ensure!(
        logits.nrows() == labels.len(),
        "label count does not match batch size"
    );
    let p = softmax(logits);
    let n = T::from_usize(labels.len()).expect("count");
    let mut loss = T::zero();
    let mut grad = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < logits.ncols(), "label {y} out of range");
        loss -= p[[i, y]].max(T::lit(1e-30)).ln();
        grad[[i, y]] -= T::one();
    }
    grad.mapv_inplace(|v| v / n);
    Ok((loss / n, grad))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn argmax_rows<T: Scalar>(p: &Array2<T>) -> Vec<usize> {
    p.outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

pub fn max_rows<T: Scalar>(p: &Array2<T>) -> Array1<T> {
    p.map_axis(Axis(1), |row| row.fold(T::neg_infinity(), |a, &b| a.max(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, cache) = max_pool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dx = max_pool2_backward(&cache, &Array4::from_elem((1, 1, 1, 1), 2.0));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let z = Array2::from_shape_vec((2, 3), vec![1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]).unwrap();
        let p = softmax(&z);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0f64).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let z = Array2::<f64>::zeros((4, 10));
        let (loss, grad) = cross_entropy(&z, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-12);
    }
}
