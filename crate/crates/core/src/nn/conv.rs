//! 2-D convolution and transposed convolution lowered to matrix products
//! through an explicit im2col buffer.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{init, LayerGrads, Param, Scalar};
use crate::error::{ensure, Result};

/// Sliding-window geometry of a convolution over a `(batch, channels, height, width)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        (batch, channels, height, width): (usize, usize, usize, usize),
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        ensure!(
            stride >= 1 && kernel >= 1,
            "kernel and stride must be positive"
        );
        ensure!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel,
            "kernel {kernel} larger than padded input {height}x{width} (pad {pad})"
        );
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input coordinate touched by output coordinate `o` at kernel offset `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Unfolds `x` (contiguous NCHW) into a `(C*k*k, B*OH*OW)` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Array2<T> {
    let (k, n) = (g.kernel, g.cols());
    let hw = g.height * g.width;
    let mut out = vec![T::zero(); g.rows() * n];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * hw..][..hw];
                    for oy in 0..g.out_h {
                        let drow = &mut dst[(b * g.out_h + oy) * g.out_w..][..g.out_w];
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let srow = &plane[iy * g.width..][..g.width];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                *d = srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), n), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back into an NCHW tensor.
pub fn col2im<T: Scalar>(cols: ArrayView2<T>, g: &Geometry) -> Array4<T> {
    let (k, n) = (g.kernel, g.cols());
    let hw = g.height * g.width;
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); g.batch * g.channels * hw];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &src_all[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.channels + c) * hw..][..hw];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let srow = &src[(b * g.out_h + oy) * g.out_w..][..g.out_w];
                        let drow = &mut plane[iy * g.width..][..g.width];
                        for (ox, &v) in srow.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                drow[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((g.batch, g.channels, g.height, g.width), out).expect("col2im shape")
}

/// `(B, C, H, W)` -> `(C, B*H*W)`.
pub(crate) fn to_channel_major<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("channel-major shape")
}

/// `(C, B*H*W)` -> `(B, C, H, W)`.
pub(crate) fn from_channel_major<T: Scalar>(
    m: &Array2<T>,
    dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c, h, w) = dims;
    let m = m
        .view()
        .into_shape_with_order((c, b, h, w))
        .expect("channel-major shape");
    m.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn contiguous<T: Scalar>(x: &Array4<T>) -> std::borrow::Cow<'_, [T]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().cloned().collect()),
    }
}

/// Standard cross-correlation layer with bias, weight shape `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(init::uniform(
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            )),
            bias: Param::new(init::uniform(&[out_channels], fan_in, rng)),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn geometry(&self, x: &Array4<T>) -> Result<Geometry> {
        ensure!(
            x.dim().1 == self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            x.dim().1
        );
        Geometry::new(x.dim(), self.kernel, self.stride, self.pad)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((
                self.out_channels,
                self.in_channels * self.kernel * self.kernel,
            ))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let g = self.geometry(x)?;
        let cols = im2col(&contiguous(x), &g);
        let mut y = self.weight_matrix().dot(&cols);
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias");
        for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        Ok(from_channel_major(
            &y,
            (g.batch, self.out_channels, g.out_h, g.out_w),
        ))
    }

    /// Returns `d loss / d x` and, when `param_grads` is set, `[d weight, d bias]`.
    pub fn backward(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        param_grads: bool,
    ) -> Result<(Array4<T>, Option<LayerGrads<T>>)> {
        let g = self.geometry(x)?;
        ensure!(
            dy.dim() == (g.batch, self.out_channels, g.out_h, g.out_w),
            "conv output gradient has shape {:?}",
            dy.dim()
        );
        let dy_mat = to_channel_major(dy);
        let grads = param_grads.then(|| {
            let cols = im2col(&contiguous(x), &g);
            let dw = dy_mat.dot(&cols.t());
            let dw = dw
                .into_shape_with_order(self.weight.value.shape())
                .expect("weight shape");
            vec![dw.into_dyn(), dy_mat.sum_axis(Axis(1)).into_dyn()]
        });
        let dcols = self.weight_matrix().t().dot(&dy_mat);
        Ok((col2im(dcols.view(), &g), grads))
    }
}

/// Fractionally-strided convolution used for learned up-sampling.
/// Weight shape `(in, out, k, k)`; output size `(H-1)*stride - 2*pad + k + output_pad`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        Self {
            weight: Param::new(init::uniform(
                &[in_channels, out_channels, kernel, kernel],
                fan_in,
                rng,
            )),
            bias: Param::new(init::uniform(&[out_channels], fan_in, rng)),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
        }
    }

    /// Geometry of the *adjoint* convolution, mapping the output back onto the input grid.
    fn geometry(&self, x: &Array4<T>) -> Result<Geometry> {
        let (b, c, h, w) = x.dim();
        ensure!(
            c == self.in_channels,
            "transposed conv expects {} input channels, got {c}",
            self.in_channels
        );
        ensure!(h >= 1 && w >= 1, "empty input");
        let out = |n: usize| (n - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad;
        let g = Geometry::new(
            (b, self.out_channels, out(h), out(w)),
            self.kernel,
            self.stride,
            self.pad,
        )?;
        ensure!(
            g.out_h == h && g.out_w == w,
            "inconsistent transposed-conv geometry"
        );
        Ok(g)
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((
                self.in_channels,
                self.out_channels * self.kernel * self.kernel,
            ))
            .expect("weight is contiguous")
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let g = self.geometry(x)?;
        let x_mat = to_channel_major(x);
        let cols = self.weight_matrix().t().dot(&x_mat);
        let mut y = col2im(cols.view(), &g);
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias");
        for mut sample in y.outer_iter_mut() {
            for (mut plane, &b) in sample.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + b);
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        param_grads: bool,
    ) -> Result<(Array4<T>, Option<LayerGrads<T>>)> {
        let g = self.geometry(x)?;
        ensure!(
            dy.dim() == (g.batch, g.channels, g.height, g.width),
            "transposed conv output gradient has shape {:?}",
            dy.dim()
        );
        let dcols = im2col(&contiguous(dy), &g);
        let grads = param_grads.then(|| {
            let dw = to_channel_major(x).dot(&dcols.t());
            let dw = dw
                .into_shape_with_order(self.weight.value.shape())
                .expect("weight shape");
            let db = dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
            vec![dw.into_dyn(), db.into_dyn()]
        });
        let dx_mat = self.weight_matrix().dot(&dcols);
        let (b, c, h, w) = x.dim();
        Ok((from_channel_major(&dx_mat, (b, c, h, w)), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut y = Array4::zeros((b, o, oh, ow));
        for bi in 0..b {
            for oi in 0..o {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (yy * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w[[oi, ci, ky, kx]]
                                            * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, oi, yy, xx]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 2, 5), (2, 1, 3), (1, 0, 3)] {
            let conv = Conv2d::<f64>::new(3, 4, k, stride, pad, &mut rng);
            let x = random4((2, 3, 7, 6), &mut rng);
            let w = conv.weight.value.clone().into_dimensionality().unwrap();
            let bias: Vec<f64> = conv.bias.value.iter().cloned().collect();
            let expected = direct_conv(&x, &w, &bias, stride, pad);
            let got = conv.forward(&x).unwrap();
            assert_eq!(got.dim(), expected.dim());
            for (a, b) in got.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random4((2, 3, 5, 5), &mut rng);
        let g = Geometry::new(x.dim(), 3, 2, 1).unwrap();
        let cols = im2col(x.as_slice().unwrap(), &g);
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = (&cols * &c).sum();
        let rhs: f64 = (&x * &col2im(c.view(), &g)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up = ConvTranspose2d::<f32>::new(8, 4, 3, 2, 1, 1, &mut rng);
        let x = Array4::zeros((2, 8, 4, 4));
        assert_eq!(up.forward(&x).unwrap().dim(), (2, 4, 8, 8));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // Sharing weights, <conv(x), y> == <x, convT(y)> when biases vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let mut up = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, 1, &mut rng);
        conv.bias.value.fill(0.0);
        up.bias.value.fill(0.0);
        up.weight.value = conv.weight.value.clone();
        let x = random4((1, 2, 8, 8), &mut rng);
        let y = random4((1, 3, 4, 4), &mut rng);
        let lhs = (&conv.forward(&x).unwrap() * &y).sum();
        let rhs = (&x * &up.forward(&y).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, &mut rng);
        assert!(conv.forward(&Array4::zeros((1, 2, 8, 8))).is_err());
    }
}
