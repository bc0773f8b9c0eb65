//! Accuracy, significance testing, ablations and image-grid export.

mod grid;
mod stats;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchConfig, Dataset};
use crate::models::{Generator, SourceClassifier};
use crate::{Error, Result};

pub use grid::{export_grid, grid_image};
pub use stats::{paired_t_test, SignificanceReport};
pub use table::{format_table, read_results_csv, write_results_csv, ResultRow};

mod ablation;
pub use ablation::{run_ablation, AblationRow, AblationVariant};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    NoDa,
    Translate,
    Adabn,
    Finetune,
    TranslateFinetune,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] = [
        Pipeline::NoDa,
        Pipeline::Translate,
        Pipeline::Adabn,
        Pipeline::Finetune,
        Pipeline::TranslateFinetune,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::NoDa => "no_da",
            Pipeline::Translate => "translate",
            Pipeline::Adabn => "adabn",
            Pipeline::Finetune => "finetune",
            Pipeline::TranslateFinetune => "translate_finetune",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    pub pipeline: Pipeline,
    pub seed: u64,
}

impl EvalResult {
    pub fn new(n_correct: usize, n_total: usize, pipeline: Pipeline, seed: u64) -> Result<Self> {
        if n_total == 0 || n_correct > n_total {
            return Err(Error::Contract(format!(
                "invalid counts {n_correct}/{n_total}"
            )));
        }
        Ok(Self {
            accuracy: n_correct as f64 / n_total as f64,
            n_correct,
            n_total,
            pipeline,
            seed,
        })
    }

    /// Same counts, relabelled with the pipeline and seed that produced them.
    pub fn tagged(self, pipeline: Pipeline, seed: u64) -> Self {
        Self {
            pipeline,
            seed,
            ..self
        }
    }
}

/// Per-image predictions of `model` on `images`, translating each batch through `g` first.
pub fn predict_dataset(
    model: &SourceClassifier,
    g: Option<&Generator>,
    data: &Dataset,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in batches(data, &BatchConfig::eval(EVAL_BATCH))? {
        let x = match g {
            Some(g) => g.forward(&batch.images)?,
            None => batch.images,
        };
        out.extend(model.predict(&x)?.predictions());
    }
    Ok(out)
}

/// Top-1 accuracy over the whole test set. With a generator, every batch is
/// translated before classification.
///
/// The result is tagged `translate` or `no_da` with seed 0; use
/// [`EvalResult::tagged`] to record the actual pipeline.
pub fn evaluate(
    model: &SourceClassifier,
    g: Option<&Generator>,
    test: &Dataset,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let predictions = predict_dataset(model, g, test)?;
    let labels = test.labels();
    let n_correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let pipeline = if g.is_some() {
        Pipeline::Translate
    } else {
        Pipeline::NoDa
    };
    EvalResult::new(n_correct, test.len(), pipeline, 0)
}

/// Runs independent evaluation jobs on separate threads; results keep job order.
pub fn evaluate_many(
    jobs: &[(&SourceClassifier, Option<&Generator>, &Dataset)],
) -> Result<Vec<EvalResult>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(m, g, d)| scope.spawn(move || evaluate(m, g, d)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Contract("evaluation thread panicked".into()))?
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_is_ratio() {
        let r = EvalResult::new(3, 4, Pipeline::NoDa, 1).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert!(EvalResult::new(5, 4, Pipeline::NoDa, 1).is_err());
        assert!(EvalResult::new(0, 0, Pipeline::NoDa, 1).is_err());
    }

    #[test]
    fn pipeline_names_round_trip() {
        for p in Pipeline::ALL {
            assert_eq!(p.as_str().parse::<Pipeline>().unwrap(), p);
        }
    }
}
