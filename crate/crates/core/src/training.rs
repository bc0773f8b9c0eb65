//! Source-classifier training, generator training and learning-rate schedules.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchConfig, Dataset};
use crate::error::ensure;
use crate::losses::{total_loss_backward, LossReport, LossWeights};
use crate::models::checkpoint;
use crate::models::{ClassifierConfig, Generator, GeneratorConfig, SourceClassifier, TraceGrads};
use crate::nn::{clip_grad_norm, layers, Adam, Optimizer, Parameters, Sgd};
use crate::{Error, Result};

pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const GENERATOR_LAST_FILE: &str = "generator-last.ckpt";
pub const GENERATOR_BEST_FILE: &str = "generator-best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Per-step cosine decay from `lr` to zero over the whole run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Momentum for SGD; ignored by Adam.
    pub momentum: f64,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Global gradient-norm ceiling for generator training.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// SGD at 1e-2 with momentum 0.9.
    pub fn source_defaults() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-2,
            momentum: 0.9,
            schedule: Schedule::Constant,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_dir: None,
            grad_clip: None,
        }
    }

    /// Adam at 1e-4 for 30 epochs, batch 128, weights (1, 10, 0.1), clipping at 10.
    pub fn generator_defaults() -> Self {
        Self {
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            grad_clip: Some(10.0),
            ..Self::source_defaults()
        }
    }

    /// SGD at 1e-3 for 5 epochs on pseudo-labelled target images.
    pub fn finetune_defaults() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            ..Self::source_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            problems.push(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                problems.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Err(e) = self.weights.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn optimizer(&self) -> Box<dyn Optimizer<f32>> {
        match self.optimizer {
            OptimizerKind::Sgd => Box::new(Sgd::new(self.lr, self.momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(self.lr)),
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.lr),
            Schedule::Cosine => cosine_schedule(step, total, self.lr),
        }
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_schedule(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    ensure!(total_steps > 0, "total_steps must be positive");
    ensure!(
        step <= total_steps,
        "step {step} beyond total_steps {total_steps}"
    );
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + phase.cos()) / 2.0)
}

/// Independent seed for a numbered sub-stream (epochs, variants, ...).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Supervised cross-entropy training of an unfrozen classifier with batch-norm in
/// training mode. Returns the mean loss of every epoch.
pub(crate) fn fit_classifier(
    model: &mut SourceClassifier,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = cfg.optimizer();
    let per_epoch =
        crate::data::num_batches(dataset.len(), cfg.batch_size, crate::data::BatchMode::Train);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stream =
            BatchConfig::train(cfg.batch_size, derive_seed(cfg.seed, epoch as u64)).labelled();
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in batches(dataset, &stream)? {
            opt.set_lr(cfg.lr_at(step, total)?);
            let labels = batch.labels.as_deref().expect("labelled stream");
            let trace = model.forward_train(&batch.images)?;
            let (loss, dlogits) = layers::cross_entropy(&trace.logits, labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "cross-entropy became {loss} at epoch {epoch}, step {step} (lr {})",
                    opt.lr()
                )));
            }
            model.zero_grad();
            model.backward(
                &trace,
                &TraceGrads {
                    logits: Some(dlogits),
                    ..TraceGrads::default()
                },
            )?;
            opt.step(model.params_mut());
            sum += f64::from(loss);
            count += 1;
            step += 1;
        }
        let mean = sum / count.max(1) as f64;
        log::info!(
            "classifier epoch {}/{}: loss {mean:.4}",
            epoch + 1,
            cfg.epochs
        );
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}

/// Trains a classifier from scratch on labelled source data, then freezes it.
/// With a checkpoint directory configured the frozen model is saved there.
pub fn train_source(
    dataset: &Dataset,
    arch: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<SourceClassifier> {
    ensure!(
        dataset.image_shape() == (arch.in_channels, arch.image_size, arch.image_size),
        "dataset images are {:?} but the architecture expects ({}, {}, {})",
        dataset.image_shape(),
        arch.in_channels,
        arch.image_size,
        arch.image_size
    );
    ensure!(
        dataset.num_classes() == arch.num_classes,
        "dataset has {} classes but the architecture has {}",
        dataset.num_classes(),
        arch.num_classes
    );
    let mut model = SourceClassifier::new(arch.clone(), cfg.seed)?;
    fit_classifier(&mut model, dataset, cfg)?;
    model.freeze();
    if let Some(dir) = &cfg.checkpoint_dir {
        ensure_dir(dir)?;
        checkpoint::save_classifier(&model, &dir.join(CLASSIFIER_FILE))?;
    }
    Ok(model)
}

/// One optimization step of generator training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub content: f64,
    pub style: f64,
    pub entropy: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, r: &LossReport) -> Self {
        Self {
            step,
            epoch,
            content: r.content,
            style: r.style,
            entropy: r.entropy,
            total: r.total,
        }
    }

    pub fn report(&self) -> LossReport {
        LossReport {
            content: self.content,
            style: self.style,
            entropy: self.entropy,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorRun {
    /// Generator after the last epoch.
    pub generator: Generator,
    pub steps: Vec<StepRecord>,
    /// Per-epoch means of every loss component.
    pub epoch_means: Vec<LossReport>,
    /// Epoch (0-based) with the lowest mean total loss.
    pub best_epoch: usize,
}

impl GeneratorRun {
    /// Generator snapshot from the best epoch, when checkpoints were written.
    pub fn best_checkpoint(dir: &Path) -> PathBuf {
        dir.join(GENERATOR_BEST_FILE)
    }
}

/// Trains an image generator against a frozen classifier using only target images.
///
/// Target labels are never requested. With a checkpoint directory configured,
/// per-step losses stream to `metrics.csv`, the latest generator is written each
/// epoch and the epoch with the lowest mean total loss is kept separately.
pub fn train_generator(
    target: &Dataset,
    model: &SourceClassifier,
    arch: &GeneratorConfig,
    cfg: &TrainConfig,
) -> Result<GeneratorRun> {
    cfg.validate()?;
    ensure!(
        model.is_frozen(),
        "generator training needs a frozen classifier"
    );
    ensure!(
        target.image_shape().0 == arch.channels,
        "target images have {} channels but the generator expects {}",
        target.image_shape().0,
        arch.channels
    );
    let mut g = Generator::new(arch.clone(), cfg.seed)?;
    let mut opt = cfg.optimizer();
    let per_epoch =
        crate::data::num_batches(target.len(), cfg.batch_size, crate::data::BatchMode::Train);
    let total = per_epoch * cfg.epochs;

    let mut metrics = match &cfg.checkpoint_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join(METRICS_FILE);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((csv::Writer::from_writer(file), path))
        }
        None => None,
    };

    let mut steps = Vec::with_capacity(total);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize);
    for epoch in 0..cfg.epochs {
        let stream = BatchConfig::train(cfg.batch_size, derive_seed(cfg.seed, epoch as u64));
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for batch in batches(target, &stream)? {
            let step = steps.len();
            opt.set_lr(cfg.lr_at(step, total)?);
            g.zero_grad();
            let report = total_loss_backward(&batch.images, &mut g, model, &cfg.weights)?;
            if !report.is_finite() {
                let kept = cfg
                    .checkpoint_dir
                    .as_ref()
                    .map(|d| {
                        format!(
                            "; last finite generator kept at {}",
                            d.join(GENERATOR_LAST_FILE).display()
                        )
                    })
                    .unwrap_or_default();
                return Err(Error::Diverged(format!(
                    "generator loss non-finite at epoch {epoch}, step {step}: {report:?}{kept}"
                )));
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(g.params_mut(), max);
            }
            opt.step(g.params_mut());

            let record = StepRecord::new(step, epoch, &report);
            if let Some((w, path)) = metrics.as_mut() {
                w.serialize(record).map_err(|e| csv_error(path, e))?;
            }
            steps.push(record);
            for (s, v) in
                sums.iter_mut()
                    .zip([report.content, report.style, report.entropy, report.total])
            {
                *s += v;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        let mean = LossReport {
            content: sums[0] / n,
            style: sums[1] / n,
            entropy: sums[2] / n,
            total: sums[3] / n,
        };
        log::info!(
            "generator epoch {}/{}: total {:.4} content {:.4} style {:.4} entropy {:.4}",
            epoch + 1,
            cfg.epochs,
            mean.total,
            mean.content,
            mean.style,
            mean.entropy
        );
        epoch_means.push(mean);
        if let Some(dir) = &cfg.checkpoint_dir {
            if let Some((w, path)) = metrics.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            checkpoint::save_generator(&g, &dir.join(GENERATOR_LAST_FILE))?;
            if mean.total < best.0 {
                checkpoint::save_generator(&g, &dir.join(GENERATOR_BEST_FILE))?;
            }
        }
        if mean.total < best.0 {
            best = (mean.total, epoch);
        }
    }
    Ok(GeneratorRun {
        generator: g,
        steps,
        epoch_means,
        best_epoch: best.1,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
