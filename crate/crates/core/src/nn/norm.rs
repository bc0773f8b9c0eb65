//! Batch normalization (with running statistics) and instance normalization.

use ndarray::{Array1, Array4};

use super::{LayerGrads, Param, Scalar};
use crate::error::{ensure, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn plane_range(b: usize, c: usize, channels: usize, hw: usize) -> std::ops::Range<usize> {
    let start = (b * channels + c) * hw;
    start..start + hw
}

/// Cached quantities from a batch-statistics forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Array1<T>,
    /// Unbiased running variance, updated with momentum [`BN_MOMENTUM`].
    pub running_var: Array1<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.fill(T::one());
        Self {
            gamma,
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `sqrt(running_var + eps)`, the stored per-channel spread.
    pub fn running_std(&self) -> Array1<T> {
        let eps = T::lit(self.eps);
        self.running_var.mapv(|v| (v + eps).sqrt())
    }

    fn check(&self, x: &Array4<T>) -> Result<()> {
        ensure!(
            x.dim().1 == self.channels(),
            "batch norm over {} channels got input with {}",
            self.channels(),
            x.dim().1
        );
        Ok(())
    }

    fn affine(&self, c: usize) -> (T, T) {
        (self.gamma.value[[c]], self.beta.value[[c]])
    }

    /// Normalizes with the stored running statistics.
    pub fn forward_eval(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check(x)?;
        let (b, ch, h, w) = x.dim();
        let hw = h * w;
        let inv = self.running_std().mapv(|s| T::one() / s);
        let mut y = x.as_standard_layout().into_owned();
        let data = y.as_slice_mut().expect("standard layout");
        for c in 0..ch {
            let (g, bt) = self.affine(c);
            let scale = g * inv[c];
            let shift = bt - self.running_mean[c] * scale;
            for bi in 0..b {
                for v in &mut data[plane_range(bi, c, ch, hw)] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    /// Normalizes with batch statistics and folds them into the running estimates.
    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<(Array4<T>, BnCache<T>)> {
        self.check(x)?;
        let (b, ch, h, w) = x.dim();
        let hw = h * w;
        let m = b * hw;
        ensure!(
            m >= 2,
            "batch norm in training mode needs at least two values per channel"
        );
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut xhat = Array4::zeros((b, ch, h, w));
        let mut inv_std = Array1::zeros(ch);
        let mut y = Array4::zeros((b, ch, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh array");
            let out = y.as_slice_mut().expect("fresh array");
            let momentum = T::lit(self.momentum);
            for c in 0..ch {
                let mut sum = 0.0f64;
                for bi in 0..b {
                    sum += src[plane_range(bi, c, ch, hw)]
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for bi in 0..b {
                    sq += src[plane_range(bi, c, ch, hw)]
                        .iter()
                        .map(|v| (v.to_f64_lossy() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let inv = T::lit(1.0 / (var + self.eps).sqrt());
                let mean_t = T::lit(mean);
                inv_std[c] = inv;
                let (g, bt) = self.affine(c);
                for bi in 0..b {
                    let r = plane_range(bi, c, ch, hw);
                    for i in r {
                        let n = (src[i] - mean_t) * inv;
                        xh[i] = n;
                        out[i] = n * g + bt;
                    }
                }
                let unbiased = T::lit(sq / (m - 1) as f64);
                self.running_mean[c] =
                    (T::one() - momentum) * self.running_mean[c] + momentum * mean_t;
                self.running_var[c] =
                    (T::one() - momentum) * self.running_var[c] + momentum * unbiased;
            }
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    pub fn backward_train(
        &self,
        cache: &BnCache<T>,
        dy: &Array4<T>,
        param_grads: bool,
    ) -> Result<(Array4<T>, Option<LayerGrads<T>>)> {
        ensure!(
            dy.dim() == cache.xhat.dim(),
            "batch norm gradient shape mismatch"
        );
        let (b, ch, h, w) = dy.dim();
        let hw = h * w;
        let m = T::from_usize(b * hw).expect("count");
        let dy = dy.as_standard_layout();
        let g = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::zeros((b, ch, h, w));
        let out = dx.as_slice_mut().expect("fresh array");
        let mut dgamma = Array1::zeros(ch);
        let mut dbeta = Array1::zeros(ch);
        for c in 0..ch {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for bi in 0..b {
                for i in plane_range(bi, c, ch, hw) {
                    sum_dy += g[i];
                    sum_dy_xhat += g[i] * xh[i];
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            let gamma = self.gamma.value[[c]];
            let k = gamma * cache.inv_std[c] / m;
            for bi in 0..b {
                for i in plane_range(bi, c, ch, hw) {
                    out[i] = k * (m * g[i] - sum_dy - xh[i] * sum_dy_xhat);
                }
            }
        }
        Ok((
            dx,
            param_grads.then(|| vec![dgamma.into_dyn(), dbeta.into_dyn()]),
        ))
    }

    /// Backward pass of [`forward_eval`](Self::forward_eval); `x` is the layer input.
    pub fn backward_eval(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        param_grads: bool,
    ) -> Result<(Array4<T>, Option<LayerGrads<T>>)> {
        self.check(x)?;
        ensure!(dy.dim() == x.dim(), "batch norm gradient shape mismatch");
        let (b, ch, h, w) = dy.dim();
        let hw = h * w;
        let inv = self.running_std().mapv(|s| T::one() / s);
        let mut dx = dy.as_standard_layout().into_owned();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let d = dx.as_slice_mut().expect("standard layout");
        let mut dgamma = Array1::zeros(ch);
        let mut dbeta = Array1::zeros(ch);
        for c in 0..ch {
            let scale = self.gamma.value[[c]] * inv[c];
            if param_grads {
                let mean = self.running_mean[c];
                let (mut sg, mut sb) = (T::zero(), T::zero());
                for bi in 0..b {
                    for i in plane_range(bi, c, ch, hw) {
                        sg += d[i] * (xs[i] - mean) * inv[c];
                        sb += d[i];
                    }
                }
                dgamma[c] = sg;
                dbeta[c] = sb;
            }
            for bi in 0..b {
                for v in &mut d[plane_range(bi, c, ch, hw)] {
                    *v *= scale;
                }
            }
        }
        Ok((
            dx,
            param_grads.then(|| vec![dgamma.into_dyn(), dbeta.into_dyn()]),
        ))
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm2d<U> {
        let cast1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        BatchNorm2d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: cast1(&self.running_mean),
            running_var: cast1(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

/// Per-sample, per-channel normalization without affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm2d {
    pub eps: f64,
}

impl Default for InstanceNorm2d {
    fn default() -> Self {
        Self { eps: BN_EPS }
    }
}

/// Normalized output plus the inverse spread of every `(sample, channel)` plane.
#[derive(Debug, Clone)]
pub struct InCache<T> {
    pub xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl InstanceNorm2d {
    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> InCache<T> {
        let (b, ch, h, w) = x.dim();
        let hw = h * w;
        let mut xhat = x.as_standard_layout().into_owned();
        let data = xhat.as_slice_mut().expect("standard layout");
        let mut inv_std = Vec::with_capacity(b * ch);
        let n = T::from_usize(hw).expect("count");
        for plane in data.chunks_mut(hw) {
            let mean = plane.iter().cloned().sum::<T>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(self.eps)).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        InCache { xhat, inv_std }
    }

    pub fn backward<T: Scalar>(&self, cache: &InCache<T>, dy: &Array4<T>) -> Array4<T> {
        let (_, _, h, w) = dy.dim();
        let hw = h * w;
        let n = T::from_usize(hw).expect("count");
        let mut dx = dy.as_standard_layout().into_owned();
        let xh = cache.xhat.as_slice().expect("standard layout");
        for ((plane, xplane), &inv) in dx
            .as_slice_mut()
            .expect("standard layout")
            .chunks_mut(hw)
            .zip(xh.chunks(hw))
            .zip(&cache.inv_std)
        {
            let mean_dy = plane.iter().cloned().sum::<T>() / n;
            let mean_dy_xhat = plane.iter().zip(xplane).map(|(&g, &x)| g * x).sum::<T>() / n;
            for (g, &x) in plane.iter_mut().zip(xplane) {
                *g = inv * (*g - mean_dy - x * mean_dy_xhat);
            }
        }
        dx
    }
}
