use std::fmt;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalResult, Pipeline};
use crate::data::Dataset;
use crate::losses::LossWeights;
use crate::models::{GeneratorConfig, SourceClassifier};
use crate::training::{train_generator, TrainConfig};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    NoDa,
    NoContent,
    NoStyle,
    NoEntropy,
    Full,
}

impl AblationVariant {
    /// Row order of the emitted table.
    pub const ROWS: [AblationVariant; 5] = [
        AblationVariant::NoDa,
        AblationVariant::NoContent,
        AblationVariant::NoStyle,
        AblationVariant::NoEntropy,
        AblationVariant::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::NoDa => "no_da",
            AblationVariant::NoContent => "no_content",
            AblationVariant::NoStyle => "no_style",
            AblationVariant::NoEntropy => "no_entropy",
            AblationVariant::Full => "full",
        }
    }

    /// Loss weights for the variant, `None` for the untranslated baseline.
    pub fn weights(&self, full: &LossWeights) -> Option<LossWeights> {
        let mut w = *full;
        match self {
            AblationVariant::NoDa => return None,
            AblationVariant::NoContent => w.content = 0.0,
            AblationVariant::NoStyle => w.style = 0.0,
            AblationVariant::NoEntropy => w.entropy = 0.0,
            AblationVariant::Full => {}
        }
        Some(w)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub weights: Option<LossWeights>,
    pub result: EvalResult,
}

/// Trains one generator per loss variant on `target_train` and evaluates each,
/// plus the untranslated baseline, on `target_test`.
///
/// `cfg.weights` defines the full-losses run; every variant shares `cfg.seed`.
/// With a checkpoint directory, each variant writes into its own subdirectory.
pub fn run_ablation(
    target_train: &Dataset,
    target_test: &Dataset,
    model: &SourceClassifier,
    arch: &GeneratorConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(AblationVariant::ROWS.len());
    for variant in AblationVariant::ROWS {
        let weights = variant.weights(&cfg.weights);
        let result = match weights {
            None => evaluate(model, None, target_test)?.tagged(Pipeline::NoDa, cfg.seed),
            Some(w) => {
                let variant_cfg = TrainConfig {
                    weights: w,
                    checkpoint_dir: cfg
                        .checkpoint_dir
                        .as_ref()
                        .map(|d| d.join(variant.as_str())),
                    ..cfg.clone()
                };
                log::info!("ablation variant {variant}: weights {w:?}");
                let run = train_generator(target_train, model, arch, &variant_cfg)?;
                evaluate(model, Some(&run.generator), target_test)?
                    .tagged(Pipeline::Translate, cfg.seed)
            }
        };
        rows.push(AblationRow {
            variant,
            weights,
            result,
        });
    }
    Ok(rows)
}
