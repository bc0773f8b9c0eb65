#![allow(dead_code)]

use sourcefree::data::{Dataset, ShiftKind, Split, SyntheticSpec};
use sourcefree::models::{ClassifierConfig, SourceClassifier};
use sourcefree::training::{train_source, TrainConfig};

pub const SIZE: usize = 12;

pub fn spec(n_per_class: usize) -> SyntheticSpec {
    SyntheticSpec {
        image_size: SIZE,
        ..SyntheticSpec::new(5, n_per_class, ShiftKind::ColorTint)
    }
}

pub fn arch() -> ClassifierConfig {
    ClassifierConfig {
        image_size: SIZE,
        ..ClassifierConfig::small()
    }
}

pub fn trained(source: &Dataset, epochs: usize, seed: u64) -> SourceClassifier {
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        seed,
        ..TrainConfig::source_defaults()
    };
    train_source(source, &arch(), &cfg).unwrap()
}

pub fn source_and_target(n_per_class: usize) -> (Dataset, Dataset) {
    let s = spec(n_per_class);
    (
        s.source(Split::Train).unwrap(),
        s.target(Split::Train).unwrap(),
    )
}
