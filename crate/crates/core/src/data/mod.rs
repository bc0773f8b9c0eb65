//! Dataset ingestion, synthetic domain pairs and batch streams.
//!
//! Images are held as 8-bit intensities and converted to `[0, 1]` floats when a
//! batch is gathered, which keeps full digit datasets at a quarter of the
//! memory an `f32` copy would need.

mod batches;
mod formats;
mod synthetic;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::{Error, ImageBatch, Result};

pub use batches::{batches, num_batches, Augment, Batch, BatchConfig, BatchMode, Batches};
pub use synthetic::{make_synthetic_pair, Shift, ShiftKind, SyntheticSpec};

/// Side length every digit domain is resized to.
pub const DIGIT_SIZE: usize = 32;
pub const DIGIT_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train or test)"
            ))),
        }
    }
}

/// A labelled image collection.
///
/// Labels are only reachable through [`Dataset::labels`], which counts every
/// access. Clones and subsets share the counter, so an adaptation routine that
/// peeks at target labels through any derived view is caught.
#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Array4<u8>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    domain_name: String,
    label_reads: Arc<AtomicUsize>,
}

impl Dataset {
    pub fn new(
        pixels: Array4<u8>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        domain_name: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            num_classes >= 2,
            "a dataset needs at least two classes, got {num_classes}"
        );
        ensure!(
            labels.len() == pixels.len_of(Axis(0)),
            "{} labels for {} images",
            labels.len(),
            pixels.len_of(Axis(0))
        );
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            pixels: pixels.as_standard_layout().into_owned(),
            labels,
            num_classes,
            split,
            domain_name: domain_name.into(),
            label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Builds a dataset from float images, which must lie in `[0, 1]`.
    pub fn from_images(
        images: &ImageBatch,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        domain_name: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            images.iter().all(|v| (0.0..=1.0).contains(v)),
            "image values must lie in [0, 1]"
        );
        Self::new(
            images.mapv(quantize),
            labels,
            num_classes,
            split,
            domain_name,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` shared by every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.pixels.dim();
        (c, h, w)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    /// Raw 8-bit pixels; `value / 255` is the image intensity.
    pub fn pixels(&self) -> ArrayView4<'_, u8> {
        self.pixels.view()
    }

    /// Every image as a float batch.
    pub fn images(&self) -> ImageBatch {
        self.pixels.mapv(dequantize)
    }

    /// Float images at the given indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<ImageBatch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for {} images",
                self.len()
            )));
        }
        Ok(self.pixels.select(Axis(0), indices).mapv(dequantize))
    }

    /// Ground-truth labels. Each call is recorded by the label-access guard.
    pub fn labels(&self) -> &[usize] {
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    /// How many times labels were read through this dataset or any view sharing its guard.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    /// Images at `indices` as a new dataset sharing this one's label guard.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for {} images",
                self.len()
            )));
        }
        Ok(Self {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            domain_name: self.domain_name.clone(),
            label_reads: Arc::clone(&self.label_reads),
        })
    }

    /// A seeded random subset holding `fraction` of the images, kept in original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        ensure!(
            fraction > 0.0 && fraction <= 1.0,
            "subsample fraction must be in (0, 1], got {fraction}"
        );
        let keep = ((self.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = order[..keep].to_vec();
        chosen.sort_unstable();
        self.subset(&chosen)
    }

    /// The same images with the given labels and a fresh guard, for pseudo-labelled training sets.
    pub fn relabeled(&self, indices: &[usize], labels: Vec<usize>) -> Result<Self> {
        ensure!(
            indices.len() == labels.len(),
            "{} indices but {} labels",
            indices.len(),
            labels.len()
        );
        let view = self.subset(indices)?;
        Self::new(
            view.pixels,
            labels,
            self.num_classes,
            self.split,
            self.domain_name.clone(),
        )
    }
}

/// Source and target datasets over one shared label set.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source: Dataset,
    pub target: Dataset,
}

impl DomainPair {
    pub fn new(source: Dataset, target: Dataset) -> Result<Self> {
        ensure!(
            source.num_classes() == target.num_classes(),
            "closed-set pair needs matching label sets: {} vs {} classes",
            source.num_classes(),
            target.num_classes()
        );
        ensure!(
            source.image_shape() == target.image_shape(),
            "source images are {:?} but target images are {:?}",
            source.image_shape(),
            target.image_shape()
        );
        Ok(Self { source, target })
    }

    pub fn shared_classes(&self) -> usize {
        self.source.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitName {
    Mnist,
    Usps,
    Svhn,
}

impl fmt::Display for DigitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DigitName::Mnist => "mnist",
            DigitName::Usps => "usps",
            DigitName::Svhn => "svhn",
        })
    }
}

impl FromStr for DigitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DigitName::Mnist),
            "usps" => Ok(DigitName::Usps),
            "svhn" => Ok(DigitName::Svhn),
            other => Err(Error::Config(format!(
                "unknown digit dataset `{other}` (expected mnist, usps or svhn)"
            ))),
        }
    }
}

/// Loads a digit dataset from `root` and normalizes it to 3x32x32.
///
/// Expected layout (files may carry a `.gz` or `.bz2` suffix):
/// - `mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte`
/// - `usps/usps` and `usps/usps.t` in LIBSVM text format
/// - `svhn/{train,test}_32x32.mat`
pub fn load_digit_dataset(name: DigitName, split: Split, root: &Path) -> Result<Dataset> {
    let (gray, labels) = match name {
        DigitName::Mnist => {
            let stem = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let images = formats::locate(
                root,
                &["mnist", "MNIST/raw", "."],
                &format!("{stem}-images-idx3-ubyte"),
            )?;
            let labels = formats::locate(
                root,
                &["mnist", "MNIST/raw", "."],
                &format!("{stem}-labels-idx1-ubyte"),
            )?;
            (
                formats::read_idx_images(&images)?,
                formats::read_idx_labels(&labels)?,
            )
        }
        DigitName::Usps => {
            let file = match split {
                Split::Train => "usps",
                Split::Test => "usps.t",
            };
            let path = formats::locate(root, &["usps", "USPS", "."], file)?;
            formats::read_usps(&path)?
        }
        DigitName::Svhn => {
            let file = match split {
                Split::Train => "train_32x32.mat",
                Split::Test => "test_32x32.mat",
            };
            let path = formats::locate(root, &["svhn", "SVHN", "."], file)?;
            let (pixels, labels) = formats::read_svhn(&path)?;
            let pixels = formats::resize_batch(&pixels, DIGIT_SIZE);
            let ds = Dataset::new(pixels, labels, DIGIT_CLASSES, split, name.to_string())?;
            return Ok(ds);
        }
    };
    let gray = formats::resize_batch(&gray, DIGIT_SIZE);
    let pixels = replicate_channels(&gray, 3);
    Dataset::new(pixels, labels, DIGIT_CLASSES, split, name.to_string())
}

/// A domain name as used in configurations: a digit dataset, the synthetic
/// source rendering (`synth`) or a shifted synthetic target (`synth-<shift>`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Digit(DigitName),
    Synthetic(Option<ShiftKind>),
}

impl Domain {
    pub fn needs_data_root(&self) -> bool {
        matches!(self, Domain::Digit(_))
    }

    /// Loads one split. `synth` supplies size, seed and shift magnitude for
    /// synthetic domains; a `synth-<shift>` name overrides the shift kind unless
    /// `synth.shift` already has that kind.
    pub fn load(&self, split: Split, root: &Path, synth: &SyntheticSpec) -> Result<Dataset> {
        match *self {
            Domain::Digit(name) => load_digit_dataset(name, split, root),
            Domain::Synthetic(None) => synth.source(split),
            Domain::Synthetic(Some(kind)) => {
                let mut spec = *synth;
                if spec.shift.kind() != kind {
                    spec.shift = Shift::default_for(kind);
                }
                spec.target(split)
            }
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Digit(d) => write!(f, "{d}"),
            Domain::Synthetic(None) => f.write_str("synth"),
            Domain::Synthetic(Some(k)) => write!(f, "synth-{k}"),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synth" || s == "synth-source" {
            return Ok(Domain::Synthetic(None));
        }
        if let Some(shift) = s.strip_prefix("synth-") {
            return Ok(Domain::Synthetic(Some(shift.parse()?)));
        }
        s.parse().map(Domain::Digit).map_err(|_| {
            Error::Config(format!(
                "unknown domain `{s}` (expected mnist, usps, svhn, synth or synth-<color_tint|brightness|saturation>)"
            ))
        })
    }
}

impl Serialize for Domain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Repeats a single-channel batch across `channels` channels.
pub fn replicate_channels(gray: &Array4<u8>, channels: usize) -> Array4<u8> {
    let (n, c, h, w) = gray.dim();
    assert_eq!(c, 1, "replicate_channels expects one input channel");
    let view = gray
        .broadcast((n, channels, h, w))
        .expect("broadcast along a unit axis");
    view.to_owned()
}

/// Maps an intensity in `[0, 1]` to the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    f32::from(v) / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn toy(n: usize) -> Dataset {
        let pixels =
            Array::from_shape_fn((n, 3, 4, 4), |(i, c, y, x)| (i * 7 + c * 3 + y + x) as u8);
        Dataset::new(
            pixels,
            (0..n).map(|i| i % 3).collect(),
            3,
            Split::Train,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn labels_are_counted_across_views() {
        let ds = toy(6);
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.images();
        let _ = ds.gather(&[0, 1]).unwrap();
        assert_eq!(ds.label_reads(), 0);
        let sub = ds.subset(&[1, 3]).unwrap();
        let clone = sub.clone();
        assert_eq!(sub.labels(), &[1, 0]);
        let _ = clone.labels();
        assert_eq!(ds.label_reads(), 2);
    }

    #[test]
    fn relabeled_has_its_own_guard() {
        let ds = toy(4);
        let pl = ds.relabeled(&[2, 0], vec![1, 1]).unwrap();
        assert_eq!(pl.labels(), &[1, 1]);
        assert_eq!(ds.label_reads(), 0);
        assert_eq!(pl.gather(&[0]).unwrap(), ds.gather(&[2]).unwrap());
    }

    #[test]
    fn rejects_bad_labels() {
        let pixels = Array4::<u8>::zeros((2, 1, 2, 2));
        assert!(Dataset::new(pixels.clone(), vec![0, 5], 3, Split::Test, "x").is_err());
        assert!(Dataset::new(pixels, vec![0], 3, Split::Test, "x").is_err());
    }

    #[test]
    fn float_round_trip_is_exact_on_levels() {
        for v in 0..=255u8 {
            assert_eq!(quantize(dequantize(v)), v);
        }
    }

    #[test]
    fn subsample_is_seeded() {
        let ds = toy(50);
        let a = ds.subsample(0.2, 9).unwrap();
        let b = ds.subsample(0.2, 9).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn replication_copies_channel() {
        let gray = Array::from_shape_fn((2, 1, 3, 3), |(n, _, y, x)| (n + y * 3 + x) as u8);
        let rgb = replicate_channels(&gray, 3);
        for c in 0..3 {
            assert_eq!(rgb.index_axis(Axis(1), c), gray.index_axis(Axis(1), 0));
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("MNIST".parse::<DigitName>().unwrap(), DigitName::Mnist);
        assert!(matches!(
            "cifar".parse::<DigitName>(),
            Err(Error::Config(_))
        ));
        assert!(matches!("val".parse::<Split>(), Err(Error::Config(_))));
    }

    #[test]
    fn domain_names() {
        for name in [
            "mnist",
            "usps",
            "svhn",
            "synth",
            "synth-color_tint",
            "synth-brightness",
            "synth-saturation",
        ] {
            let d: Domain = name.parse().unwrap();
            assert_eq!(d.to_string(), name);
        }
        assert!(matches!(
            "synth-hue".parse::<Domain>(),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            "imagenet".parse::<Domain>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pair_requires_matching_classes() {
        let a = toy(3);
        let b = Dataset::new(Array4::zeros((1, 3, 4, 4)), vec![0], 4, Split::Train, "b").unwrap();
        assert!(DomainPair::new(a.clone(), b).is_err());
        assert_eq!(DomainPair::new(a.clone(), a).unwrap().shared_classes(), 3);
    }
}
