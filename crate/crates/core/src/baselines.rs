//! Source-free baselines: AdaBN, confidence-thresholded pseudo labels and
//! pseudo-label fine-tuning, plus the rules for combining them with translation.

use std::path::Path;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchConfig, Dataset};
use crate::evaluation::{Pipeline, EVAL_BATCH};
use crate::models::{Generator, SourceClassifier, N_BLOCKS};
use crate::nn::layers;
use crate::training::{fit_classifier, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Replaces every batch-norm layer's stored statistics with exact statistics of
/// `target`, layer by layer, so each layer sees inputs already normalized with
/// the target statistics of the layers below it. Returns a frozen copy.
pub fn adabn(model: &SourceClassifier, target: &Dataset) -> Result<SourceClassifier> {
    if target.len() < 2 {
        return Err(Error::Contract(
            "adabn needs at least two target images".into(),
        ));
    }
    let mut copy = model.unfrozen_copy();
    for layer in 0..N_BLOCKS {
        let channels = copy.batch_norms()[layer].channels();
        let mut sum = Array1::<f64>::zeros(channels);
        let mut sum_sq = Array1::<f64>::zeros(channels);
        let mut count = 0usize;
        for batch in batches(target, &BatchConfig::eval(EVAL_BATCH))? {
            let trace = copy.predict(&batch.images)?;
            let a = &trace.bn_inputs[layer];
            let (b, _, h, w) = a.dim();
            for (c, plane) in a.axis_iter(Axis(1)).enumerate() {
                for &v in plane.iter() {
                    let v = f64::from(v);
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += b * h * w;
        }
        let n = count as f64;
        let mean = &sum / n;
        // Unbiased, matching how running variances accumulate during training.
        let var = ((&sum_sq - &(&mean * &mean * n)) / (n - 1.0)).mapv(|v| v.max(0.0));
        let bn = &mut copy.batch_norms_mut()?[layer];
        bn.running_mean = mean.mapv(|v| v as f32);
        bn.running_var = var.mapv(|v| v as f32);
    }
    copy.freeze();
    Ok(copy)
}

/// Confidently classified target images with their self-assigned labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Writes `index,label,confidence` rows.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["index", "label", "confidence"])
            .map_err(io)?;
        for ((i, l), c) in self.indices.iter().zip(&self.labels).zip(&self.confidences) {
            w.write_record([i.to_string(), l.to_string(), c.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path, threshold: f64) -> Result<Self> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
        let mut set = Self {
            indices: Vec::new(),
            labels: Vec::new(),
            confidences: Vec::new(),
            threshold,
        };
        for row in csv::Reader::from_path(path).map_err(io)?.deserialize() {
            let (i, l, c): (usize, usize, f64) = row.map_err(io)?;
            set.indices.push(i);
            set.labels.push(l);
            set.confidences.push(c);
        }
        Ok(set)
    }
}

/// Selects target images whose maximum softmax exceeds `threshold`.
///
/// Without a generator the prediction on the original image decides. With a
/// generator the translated image's prediction must exceed the threshold and
/// agree with the original image's prediction; confidences then come from the
/// translated image. Target labels are never read.
pub fn mine_pseudo_labels(
    model: &SourceClassifier,
    g: Option<&Generator>,
    target: &Dataset,
    threshold: f64,
) -> Result<PseudoLabelSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let mut set = PseudoLabelSet {
        indices: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        threshold,
    };
    for batch in batches(target, &BatchConfig::eval(EVAL_BATCH))? {
        let original = model.predict(&batch.images)?.probs;
        let (decisive, agree_with) = match g {
            Some(g) => (
                model.predict(&g.forward(&batch.images)?)?.probs,
                Some(layers::argmax_rows(&original)),
            ),
            None => (original, None),
        };
        let labels = layers::argmax_rows(&decisive);
        let conf = layers::max_rows(&decisive);
        for (k, &index) in batch.indices.iter().enumerate() {
            let c = f64::from(conf[k]);
            let agrees = agree_with.as_ref().is_none_or(|a| a[k] == labels[k]);
            if c > threshold && agrees {
                set.indices.push(index);
                set.labels.push(labels[k]);
                set.confidences.push(c);
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SourceClassifier,
    /// Set when fine-tuning was skipped and `model` is an unchanged copy.
    pub warning: Option<String>,
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes a copy of `model` with cross-entropy on the original target images
/// of `pseudo` and their pseudo labels. Batch-norm runs in training mode, so
/// running statistics move toward the pseudo-labelled target data.
pub fn finetune(
    model: &SourceClassifier,
    target: &Dataset,
    pseudo: &PseudoLabelSet,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if pseudo.len() < 2 {
        let warning = format!(
            "pseudo-label set has {} samples; fine-tuning skipped",
            pseudo.len()
        );
        log::warn!("{warning}");
        return Ok(FinetuneOutcome {
            model: model.clone(),
            warning: Some(warning),
            epoch_losses: Vec::new(),
        });
    }
    let train = target.relabeled(&pseudo.indices, pseudo.labels.clone())?;
    let cfg = TrainConfig {
        batch_size: cfg.batch_size.min(train.len()),
        ..cfg.clone()
    };
    let mut copy = model.unfrozen_copy();
    let epoch_losses = fit_classifier(&mut copy, &train, &cfg)?;
    copy.freeze();
    Ok(FinetuneOutcome {
        model: copy,
        warning: None,
        epoch_losses,
    })
}

/// Which adaptation steps a run composes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub adabn: bool,
    pub translate: bool,
    pub finetune: bool,
}

impl PipelineSpec {
    /// Resolves the combination to a named pipeline.
    ///
    /// AdaBN moves the classifier toward the target while translation moves
    /// target images toward the source; the two are never combined.
    pub fn resolve(&self) -> Result<Pipeline> {
        match (self.adabn, self.translate, self.finetune) {
            (false, false, false) => Ok(Pipeline::NoDa),
            (false, true, false) => Ok(Pipeline::Translate),
            (true, false, false) => Ok(Pipeline::Adabn),
            (false, false, true) => Ok(Pipeline::Finetune),
            (false, true, true) => Ok(Pipeline::TranslateFinetune),
            (true, true, _) => Err(Error::Config(
                "adabn adapts the classifier to the target while translation adapts images to the source; \
                 the directions are opposite and cannot be combined"
                    .into(),
            )),
            (true, false, true) => Err(Error::Config("adabn followed by fine-tuning is not a supported pipeline".into())),
        }
    }
}

impl From<Pipeline> for PipelineSpec {
    fn from(p: Pipeline) -> Self {
        let (adabn, translate, finetune) = match p {
            Pipeline::NoDa => (false, false, false),
            Pipeline::Translate => (false, true, false),
            Pipeline::Adabn => (true, false, false),
            Pipeline::Finetune => (false, false, true),
            Pipeline::TranslateFinetune => (false, true, true),
        };
        Self {
            adabn,
            translate,
            finetune,
        }
    }
}

impl std::str::FromStr for PipelineSpec {
    type Err = Error;

    /// Parses `+`-joined steps such as `translate+finetune`, or a pipeline name.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(p) = s.parse::<Pipeline>() {
            return Ok(p.into());
        }
        let mut spec = Self::default();
        for step in s.split('+') {
            match step.trim() {
                "adabn" => spec.adabn = true,
                "translate" => spec.translate = true,
                "finetune" => spec.finetune = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown pipeline step `{other}` in `{s}`"
                    )))
                }
            }
        }
        Ok(spec)
    }
}
