//! The source classifier: three conv/BN/ReLU blocks, global average pooling
//! and a linear head, with hooks that expose every quantity the adaptation
//! losses read.

use ndarray::{Array2, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LayerStats;
use crate::error::{ensure, Error, Result};
use crate::nn::layers::{self, MaxPoolCache};
use crate::nn::norm::BnCache;
use crate::nn::{hash_values, BatchNorm2d, Conv2d, Linear, Param, Parameters, Scalar};

pub const N_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub widths: [usize; N_BLOCKS],
    pub kernel: usize,
    pub num_classes: usize,
    pub image_size: usize,
}

impl Default for ClassifierConfig {
    /// 5x5 convolutions with 64/128/256 channels on 3x32x32 inputs, 10 classes.
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [64, 128, 256],
            kernel: 5,
            num_classes: 10,
            image_size: 32,
        }
    }
}

impl ClassifierConfig {
    /// A narrower variant for quick experiments.
    pub fn small() -> Self {
        Self {
            widths: [16, 32, 64],
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[N_BLOCKS - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "degenerate classifier config {self:?}"
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("classifier kernel must be odd".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config(
                "classifier inputs must be at least 4x4".into(),
            ));
        }
        Ok(())
    }
}

/// Intermediate buffers needed to backpropagate through a forward pass.
#[derive(Debug, Clone)]
struct Tape<T> {
    block_inputs: Vec<Array4<T>>,
    activations: Vec<Array4<T>>,
    pools: Vec<MaxPoolCache>,
    bn_caches: Vec<BnCache<T>>,
}

/// Everything a forward pass exposes: pre-normalization activations at every
/// batch-norm layer, the pooled last-layer features, logits and probabilities.
#[derive(Debug, Clone)]
pub struct ClassifierTrace<T = f32> {
    pub bn_inputs: Vec<Array4<T>>,
    pub last_features: Array2<T>,
    pub logits: Array2<T>,
    pub probs: Array2<T>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> ClassifierTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.probs.nrows()
    }

    /// Current-batch statistics at batch-norm layer `layer` (0-based).
    pub fn current_stats(&self, layer: usize) -> Result<LayerStats<T>> {
        ensure!(
            layer < self.bn_inputs.len(),
            "layer {layer} out of range (classifier has {} batch-norm layers)",
            self.bn_inputs.len()
        );
        LayerStats::of_batch(&self.bn_inputs[layer])
    }

    pub fn predictions(&self) -> Vec<usize> {
        layers::argmax_rows(&self.probs)
    }
}

/// Upstream gradients injected into a classifier backward pass. Any subset
/// may be present; absent entries contribute nothing.
#[derive(Debug, Clone)]
pub struct TraceGrads<T> {
    pub probs: Option<Array2<T>>,
    pub logits: Option<Array2<T>>,
    pub features: Option<Array2<T>>,
    pub bn_inputs: Vec<Option<Array4<T>>>,
}

impl<T> Default for TraceGrads<T> {
    fn default() -> Self {
        Self {
            probs: None,
            logits: None,
            features: None,
            bn_inputs: (0..N_BLOCKS).map(|_| None).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceClassifier<T = f32> {
    config: ClassifierConfig,
    convs: Vec<Conv2d<T>>,
    bns: Vec<BatchNorm2d<T>>,
    head: Linear<T>,
    frozen: bool,
}

fn add_opt<T: Scalar, D: ndarray::Dimension>(
    acc: &mut ndarray::Array<T, D>,
    extra: Option<&ndarray::Array<T, D>>,
) -> Result<()> {
    if let Some(e) = extra {
        ensure!(
            e.shape() == acc.shape(),
            "injected gradient shape {:?} != {:?}",
            e.shape(),
            acc.shape()
        );
        *acc += e;
    }
    Ok(())
}

impl<T: Scalar> SourceClassifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = config.kernel / 2;
        let mut convs = Vec::with_capacity(N_BLOCKS);
        let mut bns = Vec::with_capacity(N_BLOCKS);
        let mut cin = config.in_channels;
        for &w in &config.widths {
            convs.push(Conv2d::new(cin, w, config.kernel, 1, pad, &mut rng));
            bns.push(BatchNorm2d::new(w));
            cin = w;
        }
        let head = Linear::new(cin, config.num_classes, &mut rng);
        Ok(Self {
            config,
            convs,
            bns,
            head,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A trainable copy; the receiver is left untouched.
    pub fn unfrozen_copy(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c
    }

    pub fn batch_norms(&self) -> &[BatchNorm2d<T>] {
        &self.bns
    }

    /// Mutable batch-norm layers; refused once the model is frozen.
    pub fn batch_norms_mut(&mut self) -> Result<&mut [BatchNorm2d<T>]> {
        ensure!(!self.frozen, "classifier is frozen");
        Ok(&mut self.bns)
    }

    /// Stored running statistics of every batch-norm layer, in depth order.
    pub fn stored_stats(&self) -> Vec<LayerStats<T>> {
        self.bns.iter().map(LayerStats::stored).collect()
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        let s = self.config.image_size;
        ensure!(b >= 1, "empty batch");
        ensure!(
            c == self.config.in_channels && h == s && w == s,
            "classifier expects (_, {}, {s}, {s}) inputs, got {:?}",
            self.config.in_channels,
            x.dim()
        );
        Ok(())
    }

    fn forward_with<F>(
        &self,
        x: &Array4<T>,
        record: bool,
        mut normalize: F,
    ) -> Result<ClassifierTrace<T>>
    where
        F: FnMut(usize, &Array4<T>) -> Result<(Array4<T>, Option<BnCache<T>>)>,
    {
        self.check_input(x)?;
        let mut tape = Tape {
            block_inputs: Vec::new(),
            activations: Vec::new(),
            pools: Vec::new(),
            bn_caches: Vec::new(),
        };
        let mut bn_inputs = Vec::with_capacity(N_BLOCKS);
        let mut h = x.clone();
        for i in 0..N_BLOCKS {
            let a = self.convs[i].forward(&h)?;
            let (n, cache) = normalize(i, &a)?;
            let r = layers::relu(&n);
            if record {
                tape.block_inputs.push(h);
                if let Some(c) = cache {
                    tape.bn_caches.push(c);
                }
            }
            bn_inputs.push(a);
            h = if i + 1 < N_BLOCKS {
                let (p, pc) = layers::max_pool2(&r);
                if record {
                    tape.pools.push(pc);
                }
                p
            } else {
                r.clone()
            };
            if record {
                tape.activations.push(r);
            }
        }
        let last_features = layers::global_avg_pool(&h);
        let logits = self.head.forward(&last_features)?;
        let probs = layers::softmax(&logits);
        Ok(ClassifierTrace {
            bn_inputs,
            last_features,
            logits,
            probs,
            tape: record.then_some(tape),
        })
    }

    /// Inference-mode forward pass: batch norms use stored statistics, so each
    /// sample's outputs are independent of the rest of the batch.
    pub fn forward(&self, x: &Array4<T>) -> Result<ClassifierTrace<T>> {
        self.forward_with(x, true, |i, a| Ok((self.bns[i].forward_eval(a)?, None)))
    }

    /// Inference without recording a backward tape.
    pub fn predict(&self, x: &Array4<T>) -> Result<ClassifierTrace<T>> {
        self.forward_with(x, false, |i, a| Ok((self.bns[i].forward_eval(a)?, None)))
    }

    /// Training-mode forward pass: batch statistics normalize, running statistics update.
    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<ClassifierTrace<T>> {
        ensure!(!self.frozen, "classifier is frozen");
        let mut bns = std::mem::take(&mut self.bns);
        let out = self.forward_with(x, true, |i, a| {
            let (y, c) = bns[i].forward_train(a)?;
            Ok((y, Some(c)))
        });
        self.bns = bns;
        out
    }

    fn walk(
        &self,
        trace: &ClassifierTrace<T>,
        grads: &TraceGrads<T>,
        param_grads: bool,
    ) -> Result<(Array4<T>, Vec<ArrayD<T>>)> {
        let tape = trace
            .tape
            .as_ref()
            .ok_or_else(|| Error::Contract("trace was produced without a backward tape".into()))?;
        ensure!(
            grads.bn_inputs.len() == N_BLOCKS,
            "expected {N_BLOCKS} batch-norm gradient slots"
        );
        let train_mode = !tape.bn_caches.is_empty();

        let mut dlogits = Array2::zeros(trace.logits.raw_dim());
        add_opt(&mut dlogits, grads.logits.as_ref())?;
        if let Some(dp) = &grads.probs {
            ensure!(
                dp.dim() == trace.probs.dim(),
                "probability gradient shape mismatch"
            );
            dlogits += &layers::softmax_backward(&trace.probs, dp);
        }
        let (mut dfeat, head_grads) =
            self.head
                .backward(&trace.last_features, &dlogits, param_grads);
        add_opt(&mut dfeat, grads.features.as_ref())?;

        let mut per_block: Vec<Vec<ArrayD<T>>> = vec![Vec::new(); N_BLOCKS];
        let mut d = layers::global_avg_pool_backward(&dfeat, tape.activations[N_BLOCKS - 1].dim());
        for i in (0..N_BLOCKS).rev() {
            if i + 1 < N_BLOCKS {
                d = layers::max_pool2_backward(&tape.pools[i], &d);
            }
            d = layers::relu_backward(&tape.activations[i], &d);
            let (mut da, bn_g) = if train_mode {
                self.bns[i].backward_train(&tape.bn_caches[i], &d, param_grads)?
            } else {
                self.bns[i].backward_eval(&trace.bn_inputs[i], &d, param_grads)?
            };
            add_opt(&mut da, grads.bn_inputs[i].as_ref())?;
            let (dx, conv_g) = self.convs[i].backward(&tape.block_inputs[i], &da, param_grads)?;
            if param_grads {
                per_block[i].extend(conv_g.expect("requested"));
                per_block[i].extend(bn_g.expect("requested"));
            }
            d = dx;
        }
        let mut flat: Vec<ArrayD<T>> = per_block.into_iter().flatten().collect();
        if let Some(h) = head_grads {
            flat.extend(h);
        }
        Ok((d, flat))
    }

    /// Gradient of the injected upstream gradients with respect to the input
    /// images. Parameters are not touched, so this works on a frozen model.
    pub fn input_gradient(
        &self,
        trace: &ClassifierTrace<T>,
        grads: &TraceGrads<T>,
    ) -> Result<Array4<T>> {
        Ok(self.walk(trace, grads, false)?.0)
    }

    /// Backpropagates and accumulates parameter gradients; returns the input gradient.
    pub fn backward(
        &mut self,
        trace: &ClassifierTrace<T>,
        grads: &TraceGrads<T>,
    ) -> Result<Array4<T>> {
        ensure!(!self.frozen, "classifier is frozen");
        let (dx, g) = self.walk(trace, grads, true)?;
        self.accumulate(&g);
        Ok(dx)
    }

    /// SHA-256 over every parameter and running statistic.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            hash_values(&mut h, p.value.iter().cloned());
        }
        for bn in &self.bns {
            hash_values(&mut h, bn.running_mean.iter().cloned());
            hash_values(&mut h, bn.running_var.iter().cloned());
        }
        hex::encode(h.finalize())
    }

    /// Hash of the parameters other than batch-norm running statistics.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            hash_values(&mut h, p.value.iter().cloned());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> SourceClassifier<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            pad: c.pad,
        };
        SourceClassifier {
            config: self.config.clone(),
            convs: self.convs.iter().map(conv).collect(),
            bns: self.bns.iter().map(|b| b.cast()).collect(),
            head: Linear {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
            frozen: self.frozen,
        }
    }

    /// Named tensors in a fixed order (checkpoint layout).
    pub(crate) fn named_tensors(&self) -> Vec<(String, &ArrayD<T>)> {
        let mut out = Vec::new();
        for i in 0..N_BLOCKS {
            out.push((format!("conv{i}.weight"), &self.convs[i].weight.value));
            out.push((format!("conv{i}.bias"), &self.convs[i].bias.value));
            out.push((format!("bn{i}.gamma"), &self.bns[i].gamma.value));
            out.push((format!("bn{i}.beta"), &self.bns[i].beta.value));
        }
        out.push(("head.weight".into(), &self.head.weight.value));
        out.push(("head.bias".into(), &self.head.bias.value));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, (c, b)) in self.convs.iter_mut().zip(self.bns.iter_mut()).enumerate() {
            out.push((format!("conv{i}.weight"), &mut c.weight.value));
            out.push((format!("conv{i}.bias"), &mut c.bias.value));
            out.push((format!("bn{i}.gamma"), &mut b.gamma.value));
            out.push((format!("bn{i}.beta"), &mut b.beta.value));
        }
        out.push(("head.weight".into(), &mut self.head.weight.value));
        out.push(("head.bias".into(), &mut self.head.bias.value));
        out
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

impl<T: Scalar> Parameters<T> for SourceClassifier<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            out.extend([&c.weight, &c.bias, &b.gamma, &b.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for (c, b) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.extend([&mut c.weight, &mut c.bias, &mut b.gamma, &mut b.beta]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }
}
