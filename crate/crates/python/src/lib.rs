//! Python bindings: datasets, the source classifier, the generator, the
//! baselines and the command-line entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sourcefree::baselines::{self, PseudoLabelSet};
use sourcefree::data::{load_digit_dataset, Dataset, DigitName, ShiftKind, Split, SyntheticSpec};
use sourcefree::evaluation::{self, paired_t_test};
use sourcefree::losses::LossWeights;
use sourcefree::models::{
    checkpoint, ClassifierConfig, Generator, GeneratorConfig, SourceClassifier,
};
use sourcefree::training::{self, TrainConfig};
use sourcefree::Error;

/// Per-epoch (content, style, entropy, total) means.
type EpochLosses = (f64, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Contract(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

type Shape4 = (usize, usize, usize, usize);

/// Labelled images; label reads are counted.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// One side of a synthetic digit pair: `role` is "source" or "target".
    #[staticmethod]
    #[pyo3(signature = (role, split = "train", seed = 0, n_per_class = 100, shift = "color_tint", image_size = 16))]
    fn synthetic(
        role: &str,
        split: &str,
        seed: u64,
        n_per_class: usize,
        shift: &str,
        image_size: usize,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            image_size,
            ..SyntheticSpec::new(seed, n_per_class, parse::<ShiftKind>(shift)?)
        };
        let split: Split = parse(split)?;
        let inner = match role {
            "source" => spec.source(split),
            "target" => spec.target(split),
            other => {
                return Err(PyValueError::new_err(format!(
                    "role must be source or target, got {other}"
                )))
            }
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// MNIST, USPS or SVHN from local files under `root`.
    #[staticmethod]
    fn load_digits(name: &str, split: &str, root: PathBuf) -> PyResult<Self> {
        let inner =
            load_digit_dataset(parse::<DigitName>(name)?, parse(split)?, &root).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({}, {}, n={})",
            self.inner.domain_name(),
            self.inner.split(),
            self.inner.len()
        )
    }

    #[getter]
    fn domain_name(&self) -> String {
        self.inner.domain_name().to_string()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        self.inner.image_shape()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn label_reads(&self) -> usize {
        self.inner.label_reads()
    }

    /// Images as a flat row-major list of floats in [0, 1] and their (N, C, H, W) shape.
    fn images(&self) -> (Vec<f32>, Shape4) {
        let x = self.inner.images();
        let shape = x.dim();
        (x.into_iter().collect(), shape)
    }

    /// Reading labels increments `label_reads`.
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn subsample(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.subsample(fraction, seed).map_err(py_err)?,
        })
    }
}

fn classifier_preset(preset: &str, image_size: usize) -> PyResult<ClassifierConfig> {
    let base = match preset {
        "paper" => ClassifierConfig::default(),
        "small" => ClassifierConfig::small(),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown preset {other} (paper or small)"
            )))
        }
    };
    Ok(ClassifierConfig { image_size, ..base })
}

/// A frozen source classifier.
#[pyclass(name = "Classifier", frozen)]
struct PyClassifier {
    inner: SourceClassifier,
}

#[pymethods]
impl PyClassifier {
    /// Trains on a labelled source dataset with SGD and freezes the result.
    #[staticmethod]
    #[pyo3(signature = (dataset, preset = "small", epochs = 10, batch_size = 128, lr = 1e-2, seed = 0))]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        preset: &str,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let (_, h, _) = dataset.inner.image_shape();
        let arch = classifier_preset(preset, h)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            ..TrainConfig::source_defaults()
        };
        let inner = py
            .detach(|| training::train_source(&dataset.inner, &arch, &cfg))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_classifier(&path).map_err(py_err)?,
        })
    }

    /// Writes a checkpoint and returns its sha256.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        checkpoint::save_classifier(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn state_hash(&self) -> String {
        self.inner.state_hash()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Top-1 accuracy on `dataset`, translating each batch first when a generator is given.
    #[pyo3(signature = (dataset, generator = None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        generator: Option<&PyGenerator>,
    ) -> PyResult<f64> {
        let g = generator.map(|g| &g.inner);
        let r = py
            .detach(|| evaluation::evaluate(&self.inner, g, &dataset.inner))
            .map_err(py_err)?;
        Ok(r.accuracy)
    }

    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<usize>> {
        evaluation::predict_dataset(&self.inner, None, &dataset.inner).map_err(py_err)
    }
}

/// An image-to-image generator trained against a frozen classifier.
#[pyclass(name = "Generator", frozen)]
struct PyGenerator {
    inner: Generator,
}

#[pymethods]
impl PyGenerator {
    /// Trains on unlabelled target images. Returns the final generator and the
    /// per-epoch mean losses as (content, style, entropy, total) tuples.
    #[staticmethod]
    #[pyo3(signature = (
        target, classifier, preset = "small", epochs = 30, batch_size = 128, lr = 1e-4, seed = 0,
        lambda_content = 1.0, lambda_style = 10.0, lambda_entropy = 0.1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        target: &PyDataset,
        classifier: &PyClassifier,
        preset: &str,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        lambda_content: f64,
        lambda_style: f64,
        lambda_entropy: f64,
    ) -> PyResult<(Self, Vec<EpochLosses>)> {
        let arch = match preset {
            "paper" => GeneratorConfig::default(),
            "small" => GeneratorConfig::small(),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown preset {other} (paper or small)"
                )))
            }
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            weights: LossWeights::new(lambda_content, lambda_style, lambda_entropy)
                .map_err(py_err)?,
            ..TrainConfig::generator_defaults()
        };
        let run = py
            .detach(|| training::train_generator(&target.inner, &classifier.inner, &arch, &cfg))
            .map_err(py_err)?;
        let losses = run
            .epoch_means
            .iter()
            .map(|r| (r.content, r.style, r.entropy, r.total))
            .collect();
        Ok((
            Self {
                inner: run.generator,
            },
            losses,
        ))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_generator(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        checkpoint::save_generator(&self.inner, &path).map_err(py_err)
    }

    /// Translated images of `dataset`, flat, with their shape.
    fn translate(&self, dataset: &PyDataset) -> PyResult<(Vec<f32>, Shape4)> {
        let y = self
            .inner
            .forward(&dataset.inner.images())
            .map_err(py_err)?;
        let shape = y.dim();
        Ok((y.into_iter().collect(), shape))
    }
}

/// Paired t-test statistics.
#[pyclass(name = "Significance", frozen, get_all)]
struct PySignificance {
    mean_diff: f64,
    t_statistic: f64,
    df: usize,
    p_value: f64,
}

#[pyfunction]
fn paired_t(a: Vec<f64>, b: Vec<f64>) -> PyResult<PySignificance> {
    let r = paired_t_test(&a, &b).map_err(py_err)?;
    Ok(PySignificance {
        mean_diff: r.mean_diff,
        t_statistic: r.t_statistic,
        df: r.df,
        p_value: r.p_value,
    })
}

/// Copy of `classifier` with batch-norm statistics recomputed on `target`.
#[pyfunction]
fn adabn(classifier: &PyClassifier, target: &PyDataset) -> PyResult<PyClassifier> {
    Ok(PyClassifier {
        inner: baselines::adabn(&classifier.inner, &target.inner).map_err(py_err)?,
    })
}

/// Returns (indices, labels, confidences) of confidently classified target images.
#[pyfunction]
#[pyo3(signature = (classifier, target, generator = None, threshold = 0.95))]
fn mine_pseudo_labels(
    classifier: &PyClassifier,
    target: &PyDataset,
    generator: Option<&PyGenerator>,
    threshold: f64,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<f64>)> {
    let set = baselines::mine_pseudo_labels(
        &classifier.inner,
        generator.map(|g| &g.inner),
        &target.inner,
        threshold,
    )
    .map_err(py_err)?;
    Ok((set.indices, set.labels, set.confidences))
}

/// Fine-tunes a copy of `classifier` on target images with the given pseudo labels.
#[pyfunction]
#[pyo3(signature = (classifier, target, indices, labels, epochs = 5, batch_size = 128, lr = 1e-3, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    classifier: &PyClassifier,
    target: &PyDataset,
    indices: Vec<usize>,
    labels: Vec<usize>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> PyResult<PyClassifier> {
    let n = indices.len();
    let set = PseudoLabelSet {
        indices,
        labels,
        confidences: vec![1.0; n],
        threshold: 0.0,
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        seed,
        ..TrainConfig::finetune_defaults()
    };
    let out = py
        .detach(|| baselines::finetune(&classifier.inner, &target.inner, &set, &cfg))
        .map_err(py_err)?;
    Ok(PyClassifier { inner: out.model })
}

/// Runs the `sourcefree` command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("sourcefree".to_string()).chain(args);
    py.detach(|| sourcefree::cli::main_with_args(argv))
}

#[pymodule]
#[pyo3(name = "sourcefree")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PySignificance>()?;
    m.add_function(wrap_pyfunction!(paired_t, m)?)?;
    m.add_function(wrap_pyfunction!(adabn, m)?)?;
    m.add_function(wrap_pyfunction!(mine_pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
