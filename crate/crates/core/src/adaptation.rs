//! Runs the adaptation pipelines for one seed: translation, AdaBN, pseudo-label
//! fine-tuning and their allowed combinations, each scored on the target test set.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    adabn, finetune, mine_pseudo_labels, PipelineSpec, PseudoLabelSet, DEFAULT_THRESHOLD,
};
use crate::data::Dataset;
use crate::evaluation::{evaluate, EvalResult, Pipeline};
use crate::models::{Generator, GeneratorConfig, SourceClassifier};
use crate::training::{train_generator, GeneratorRun, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub generator_arch: GeneratorConfig,
    pub generator: TrainConfig,
    pub finetune: TrainConfig,
    pub threshold: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            generator_arch: GeneratorConfig::default(),
            generator: TrainConfig::generator_defaults(),
            finetune: TrainConfig::finetune_defaults(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptRun {
    /// One result per requested pipeline, in request order.
    pub results: Vec<EvalResult>,
    /// Present when a generator was trained in this run.
    pub generator_run: Option<GeneratorRun>,
    pub generator: Option<Generator>,
    pub pseudo_labels: Vec<(Pipeline, PseudoLabelSet)>,
}

/// Adapts `model` to the target domain with every requested pipeline.
///
/// A generator is trained once (unless `pretrained` is given) and shared by the
/// translation pipelines. Every combination is validated before any training.
pub fn adapt(
    model: &SourceClassifier,
    target_train: &Dataset,
    target_test: &Dataset,
    pipelines: &[PipelineSpec],
    cfg: &AdaptConfig,
    seed: u64,
    pretrained: Option<&Generator>,
) -> Result<AdaptRun> {
    if pipelines.is_empty() {
        return Err(Error::Config("no pipelines requested".into()));
    }
    let resolved: Vec<Pipeline> = pipelines
        .iter()
        .map(PipelineSpec::resolve)
        .collect::<Result<_>>()?;
    if !model.is_frozen() {
        return Err(Error::Contract(
            "adaptation starts from a frozen source classifier".into(),
        ));
    }

    let needs_generator = resolved
        .iter()
        .any(|p| matches!(p, Pipeline::Translate | Pipeline::TranslateFinetune));
    let mut generator_run = None;
    let generator = match (needs_generator, pretrained) {
        (false, _) => None,
        (true, Some(g)) => Some(g.clone()),
        (true, None) => {
            let gen_cfg = TrainConfig {
                seed,
                ..cfg.generator.clone()
            };
            let run = train_generator(target_train, model, &cfg.generator_arch, &gen_cfg)?;
            let g = run.generator.clone();
            generator_run = Some(run);
            Some(g)
        }
    };

    let ft_cfg = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let mut results = Vec::with_capacity(resolved.len());
    let mut pseudo_labels = Vec::new();
    for pipeline in resolved {
        let result = match pipeline {
            Pipeline::NoDa => evaluate(model, None, target_test)?,
            Pipeline::Translate => evaluate(model, generator.as_ref(), target_test)?,
            Pipeline::Adabn => evaluate(&adabn(model, target_train)?, None, target_test)?,
            Pipeline::Finetune | Pipeline::TranslateFinetune => {
                let g = if pipeline == Pipeline::TranslateFinetune {
                    generator.as_ref()
                } else {
                    None
                };
                let pseudo = mine_pseudo_labels(model, g, target_train, cfg.threshold)?;
                log::info!(
                    "{pipeline}: {} pseudo labels above {}",
                    pseudo.len(),
                    cfg.threshold
                );
                let tuned = finetune(model, target_train, &pseudo, &ft_cfg)?;
                pseudo_labels.push((pipeline, pseudo));
                evaluate(&tuned.model, None, target_test)?
            }
        };
        results.push(result.tagged(pipeline, seed));
    }
    Ok(AdaptRun {
        results,
        generator_run,
        generator,
        pseudo_labels,
    })
}
