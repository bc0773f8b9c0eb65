//! Loads the real MNIST files when they are available locally
//! (`SFDA_DATA_ROOT`, falling back to `/root/data`); otherwise returns early.

use std::path::PathBuf;

use sourcefree::data::{batches, load_digit_dataset, BatchConfig, DigitName, Split, DIGIT_SIZE};

fn mnist_root() -> Option<PathBuf> {
    let root = std::env::var_os("SFDA_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data"));
    root.join("mnist").is_dir().then_some(root)
}

#[test]
fn mnist_loads_as_three_channel_32px() {
    let Some(root) = mnist_root() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let train = load_digit_dataset(DigitName::Mnist, Split::Train, &root).unwrap();
    let test = load_digit_dataset(DigitName::Mnist, Split::Test, &root).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.image_shape(), (3, DIGIT_SIZE, DIGIT_SIZE));
    assert_eq!(train.domain_name(), "mnist");

    assert_eq!(
        batches(&train, &BatchConfig::train(128, 0)).unwrap().len(),
        468
    );
    let eval: Vec<_> = batches(&test, &BatchConfig::eval(128)).unwrap().collect();
    assert_eq!(eval.len(), 79);
    assert_eq!(eval.last().unwrap().images.dim().0, 16);

    let x = test.gather(&[0]).unwrap();
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    // Gray digits replicated to three identical channels.
    assert_eq!(
        x.index_axis(ndarray::Axis(1), 0),
        x.index_axis(ndarray::Axis(1), 2)
    );
    let labels = test.labels();
    assert!(labels.iter().all(|&l| l < 10));
    assert_eq!(labels[0], 7);
}

#[test]
fn missing_dataset_files_are_ingest_errors() {
    let dir = tempfile::tempdir().unwrap();
    for name in [DigitName::Mnist, DigitName::Usps, DigitName::Svhn] {
        let err = load_digit_dataset(name, Split::Train, dir.path()).unwrap_err();
        assert!(matches!(err, sourcefree::Error::Ingest { .. }), "{err}");
    }
}
