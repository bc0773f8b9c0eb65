//! Residual image-to-image generator: a 7x7 stem, two stride-2 down
//! convolutions, a stack of residual blocks, two transposed-conv up-samplers
//! and a 7x7 head. Instance norm follows every inner convolution.
//!
//! The head predicts a correction in logit space that is added to the input's
//! logit before the sigmoid, so a small head output keeps `g(x)` close to `x`.

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::layers::{self, relu, relu_backward};
use crate::nn::norm::InCache;
use crate::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d, Param, Parameters, Scalar};

/// Inputs are clamped to `[CLAMP, 1 - CLAMP]` before taking the logit.
const CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub base_width: usize,
    pub res_blocks: usize,
    /// Multiplier applied to the head weights at initialization.
    pub head_init_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_width: 32,
            res_blocks: 4,
            head_init_scale: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn small() -> Self {
        Self {
            base_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 {
            return Err(Error::Config(format!(
                "degenerate generator config {self:?}"
            )));
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            return Err(Error::Config(
                "head_init_scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct NormAct<T> {
    input: Array4<T>,
    norm: InCache<T>,
    out: Array4<T>,
}

#[derive(Debug, Clone)]
struct ResTape<T> {
    first: NormAct<T>,
    second_input: Array4<T>,
    second_norm: InCache<T>,
}

/// Cached activations of one generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTape<T> {
    stem: NormAct<T>,
    down: Vec<NormAct<T>>,
    res: Vec<ResTape<T>>,
    up: Vec<NormAct<T>>,
    head_input: Array4<T>,
    output: Array4<T>,
}

impl<T> GeneratorTape<T> {
    pub fn output(&self) -> &Array4<T> {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T = f32> {
    config: GeneratorConfig,
    stem: Conv2d<T>,
    down: Vec<Conv2d<T>>,
    res: Vec<(Conv2d<T>, Conv2d<T>)>,
    up: Vec<ConvTranspose2d<T>>,
    head: Conv2d<T>,
    norm: InstanceNorm2d,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, w) = (config.channels, config.base_width);
        let stem = Conv2d::new(c, w, 7, 1, 3, &mut rng);
        let down = vec![
            Conv2d::new(w, 2 * w, 3, 2, 1, &mut rng),
            Conv2d::new(2 * w, 4 * w, 3, 2, 1, &mut rng),
        ];
        let res = (0..config.res_blocks)
            .map(|_| {
                (
                    Conv2d::new(4 * w, 4 * w, 3, 1, 1, &mut rng),
                    Conv2d::new(4 * w, 4 * w, 3, 1, 1, &mut rng),
                )
            })
            .collect();
        let up = vec![
            ConvTranspose2d::new(4 * w, 2 * w, 3, 2, 1, 1, &mut rng),
            ConvTranspose2d::new(2 * w, w, 3, 2, 1, 1, &mut rng),
        ];
        let mut head = Conv2d::new(w, c, 7, 1, 3, &mut rng);
        let scale = T::lit(config.head_init_scale);
        head.weight.value.mapv_inplace(|v| v * scale);
        head.bias.value.fill(T::zero());
        Ok(Self {
            config,
            stem,
            down,
            res,
            up,
            head,
            norm: InstanceNorm2d::default(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        ensure!(b >= 1, "empty batch");
        ensure!(
            c == self.config.channels,
            "generator expects {} channels, got {c}",
            self.config.channels
        );
        ensure!(
            h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0,
            "generator needs spatial size divisible by 4, got {h}x{w}"
        );
        Ok(())
    }

    fn norm_act(&self, input: Array4<T>, pre: Array4<T>) -> NormAct<T> {
        let norm = self.norm.forward(&pre);
        let out = relu(&norm.xhat);
        NormAct { input, norm, out }
    }

    /// Forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward_tape(&self, x: &Array4<T>) -> Result<GeneratorTape<T>> {
        self.check_input(x)?;
        let stem = self.norm_act(x.clone(), self.stem.forward(x)?);
        let mut h = stem.out.clone();
        let mut down = Vec::with_capacity(self.down.len());
        for conv in &self.down {
            let na = self.norm_act(h.clone(), conv.forward(&h)?);
            h = na.out.clone();
            down.push(na);
        }
        let mut res = Vec::with_capacity(self.res.len());
        for (a, b) in &self.res {
            let first = self.norm_act(h.clone(), a.forward(&h)?);
            let second_norm = self.norm.forward(&b.forward(&first.out)?);
            h = &h + &second_norm.xhat;
            res.push(ResTape {
                second_input: first.out.clone(),
                first,
                second_norm,
            });
        }
        let mut up = Vec::with_capacity(self.up.len());
        for conv in &self.up {
            let na = self.norm_act(h.clone(), conv.forward(&h)?);
            h = na.out.clone();
            up.push(na);
        }
        let z = self.head.forward(&h)?;
        let (lo, hi) = (T::lit(CLAMP), T::lit(1.0 - CLAMP));
        let mut output = x.mapv(|v| {
            let v = v.max(lo).min(hi);
            (v / (T::one() - v)).ln()
        });
        output += &z;
        output.mapv_inplace(layers::sigmoid);
        Ok(GeneratorTape {
            stem,
            down,
            res,
            up,
            head_input: h,
            output,
        })
    }

    /// Translates a batch: same shape out, values in `(0, 1)`.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.forward_tape(x)?.output)
    }

    fn walk(&self, tape: &GeneratorTape<T>, d_out: &Array4<T>) -> Result<Vec<ArrayD<T>>> {
        ensure!(
            d_out.dim() == tape.output.dim(),
            "generator output gradient shape mismatch"
        );
        let mut dz = d_out.clone();
        ndarray::Zip::from(&mut dz)
            .and(&tape.output)
            .for_each(|g, &y| *g = *g * y * (T::one() - y));

        let (mut d, head_g) = self.head.backward(&tape.head_input, &dz, true)?;
        let mut up_g = Vec::new();
        for (conv, na) in self.up.iter().zip(&tape.up).rev() {
            let dn = self.norm.backward(&na.norm, &relu_backward(&na.out, &d));
            let (dx, g) = conv.backward(&na.input, &dn, true)?;
            up_g.push(g.expect("requested"));
            d = dx;
        }
        let mut res_g = Vec::new();
        for ((a, b), rt) in self.res.iter().zip(&tape.res).rev() {
            let dv = self.norm.backward(&rt.second_norm, &d);
            let (dru, gb) = b.backward(&rt.second_input, &dv, true)?;
            let dn = self
                .norm
                .backward(&rt.first.norm, &relu_backward(&rt.first.out, &dru));
            let (dx, ga) = a.backward(&rt.first.input, &dn, true)?;
            d = &d + &dx;
            res_g.push((ga.expect("requested"), gb.expect("requested")));
        }
        let mut down_g = Vec::new();
        for (conv, na) in self.down.iter().zip(&tape.down).rev() {
            let dn = self.norm.backward(&na.norm, &relu_backward(&na.out, &d));
            let (dx, g) = conv.backward(&na.input, &dn, true)?;
            down_g.push(g.expect("requested"));
            d = dx;
        }
        let dn = self
            .norm
            .backward(&tape.stem.norm, &relu_backward(&tape.stem.out, &d));
        let (_, stem_g) = self.stem.backward(&tape.stem.input, &dn, true)?;

        let mut flat = stem_g.expect("requested");
        flat.extend(down_g.into_iter().rev().flatten());
        for (ga, gb) in res_g.into_iter().rev() {
            flat.extend(ga);
            flat.extend(gb);
        }
        flat.extend(up_g.into_iter().rev().flatten());
        flat.extend(head_g.expect("requested"));
        Ok(flat)
    }

    /// Accumulates parameter gradients of a loss whose gradient with respect
    /// to the generator output is `d_out`.
    pub fn backward(&mut self, tape: &GeneratorTape<T>, d_out: &Array4<T>) -> Result<()> {
        let g = self.walk(tape, d_out)?;
        self.accumulate(&g);
        Ok(())
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &ArrayD<T>)> {
        self.names()
            .into_iter()
            .zip(self.params())
            .map(|(n, p)| (n, &p.value))
            .collect()
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        let names = self.names();
        names
            .into_iter()
            .zip(self.params_mut())
            .map(|(n, p)| (n, &mut p.value))
            .collect()
    }

    fn names(&self) -> Vec<String> {
        let mut layers = vec!["stem".to_string()];
        layers.extend((0..self.down.len()).map(|i| format!("down{i}")));
        for i in 0..self.res.len() {
            layers.push(format!("res{i}.a"));
            layers.push(format!("res{i}.b"));
        }
        layers.extend((0..self.up.len()).map(|i| format!("up{i}")));
        layers.push("head".into());
        layers
            .into_iter()
            .flat_map(|l| [format!("{l}.weight"), format!("{l}.bias")])
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.stem.weight, &self.stem.bias];
        for c in &self.down {
            out.extend([&c.weight, &c.bias]);
        }
        for (a, b) in &self.res {
            out.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        for c in &self.up {
            out.extend([&c.weight, &c.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for c in &mut self.down {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        for (a, b) in &mut self.res {
            out.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
        }
        for c in &mut self.up {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shape_matches_input() {
        let g = Generator::<f32>::new(GeneratorConfig::small(), 0).unwrap();
        let x = batch((16, 3, 32, 32), 1);
        assert_eq!(g.forward(&x).unwrap().dim(), (16, 3, 32, 32));
    }

    #[test]
    fn outputs_are_bounded() {
        let mut g = Generator::<f32>::new(GeneratorConfig::small(), 2).unwrap();
        for p in g.params_mut() {
            p.value.mapv_inplace(|v| v * 50.0);
        }
        let y = g.forward(&batch((4, 3, 16, 16), 3)).unwrap();
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fresh_generator_is_near_identity() {
        let g = Generator::<f32>::new(GeneratorConfig::default(), 11).unwrap();
        let x = batch((8, 3, 32, 32), 12);
        let y = g.forward(&x).unwrap();
        let mut total = 0.0;
        for (xs, ys) in x.outer_iter().zip(y.outer_iter()) {
            total += xs
                .iter()
                .zip(ys.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
        }
        assert!(total / 8.0 < 0.3, "mean L-inf distance {}", total / 8.0);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_four() {
        let g = Generator::<f32>::new(GeneratorConfig::small(), 0).unwrap();
        assert!(g.forward(&Array4::zeros((1, 3, 30, 30))).is_err());
        assert!(g.forward(&Array4::zeros((1, 1, 32, 32))).is_err());
    }

    #[test]
    fn names_align_with_parameters() {
        let g = Generator::<f32>::new(GeneratorConfig::small(), 0).unwrap();
        assert_eq!(g.named_tensors().len(), g.params().len());
        assert_eq!(g.named_tensors()[0].0, "stem.weight");
        assert_eq!(g.named_tensors().last().unwrap().0, "head.bias");
    }
}
