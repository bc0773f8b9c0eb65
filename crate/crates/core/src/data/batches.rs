use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{Error, ImageBatch, Result};

/// Zero padding applied before a random crop.
const CROP_PAD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Drops the final short batch; every batch has at least two images.
    Train,
    /// Keeps the final short batch so the dataset is covered exactly once.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    #[default]
    None,
    CropFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub shuffle_seed: Option<u64>,
    pub augment: Augment,
    pub mode: BatchMode,
    /// Whether batches carry labels. Reading them trips the dataset's label guard.
    pub with_labels: bool,
}

impl BatchConfig {
    /// Shuffled, unlabelled training stream.
    pub fn train(batch_size: usize, shuffle_seed: u64) -> Self {
        Self {
            batch_size,
            shuffle_seed: Some(shuffle_seed),
            augment: Augment::None,
            mode: BatchMode::Train,
            with_labels: false,
        }
    }

    /// In-order stream covering every image once.
    pub fn eval(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle_seed: None,
            augment: Augment::None,
            mode: BatchMode::Eval,
            with_labels: false,
        }
    }

    pub fn labelled(mut self) -> Self {
        self.with_labels = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Dataset positions of the images, in batch order.
    pub indices: Vec<usize>,
    pub images: ImageBatch,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn num_batches(n: usize, batch_size: usize, mode: BatchMode) -> usize {
    match mode {
        BatchMode::Train => n / batch_size,
        BatchMode::Eval => n.div_ceil(batch_size),
    }
}

/// One epoch over `dataset`.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    config: BatchConfig,
    order: Vec<usize>,
    cursor: usize,
    remaining: usize,
    rng: ChaCha8Rng,
}

pub fn batches<'a>(dataset: &'a Dataset, config: &BatchConfig) -> Result<Batches<'a>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if config.mode == BatchMode::Train {
        if config.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for training streams, got {}",
                config.batch_size
            )));
        }
        if dataset.len() < config.batch_size {
            return Err(Error::Config(format!(
                "{} images cannot fill one training batch of {}",
                dataset.len(),
                config.batch_size
            )));
        }
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let seed = config.shuffle_seed.unwrap_or(0);
    if config.shuffle_seed.is_some() {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(Batches {
        dataset,
        remaining: num_batches(dataset.len(), config.batch_size, config.mode),
        config: config.clone(),
        order,
        cursor: 0,
        rng,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut images = self
            .dataset
            .gather(&indices)
            .expect("indices come from the dataset");
        if self.config.augment == Augment::CropFlip {
            crop_flip(&mut images, &mut self.rng);
        }
        let labels = self.config.with_labels.then(|| {
            let all = self.dataset.labels();
            indices.iter().map(|&i| all[i]).collect()
        });
        Some(Batch {
            indices,
            images,
            labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for Batches<'_> {}

fn crop_flip<R: Rng>(images: &mut Array4<f32>, rng: &mut R) {
    let (_, c, h, w) = images.dim();
    let mut padded = Array4::<f32>::zeros((1, c, h + 2 * CROP_PAD, w + 2 * CROP_PAD));
    for mut img in images.outer_iter_mut() {
        padded
            .slice_mut(s![0, .., CROP_PAD..CROP_PAD + h, CROP_PAD..CROP_PAD + w])
            .assign(&img);
        let dy = rng.gen_range(0..=2 * CROP_PAD);
        let dx = rng.gen_range(0..=2 * CROP_PAD);
        let crop = padded.slice(s![0, .., dy..dy + h, dx..dx + w]);
        if rng.gen_bool(0.5) {
            img.assign(&crop.slice(s![.., .., ..;-1]));
        } else {
            img.assign(&crop);
        }
    }
}
