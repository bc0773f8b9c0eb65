use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Command, ExperimentConfig};
use crate::adaptation::{adapt, AdaptConfig};
use crate::data::{Dataset, Domain, Split};
use crate::evaluation::{
    evaluate, export_grid, format_table, paired_t_test, run_ablation, write_results_csv, Pipeline,
    ResultRow, SignificanceReport,
};
use crate::models::checkpoint::{file_hash, load_classifier, load_generator};
use crate::models::SourceClassifier;
use crate::training::{train_generator, train_source, TrainConfig};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";
pub const SIGNIFICANCE_FILE: &str = "significance.json";
pub const GRID_FILE: &str = "grid.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub state: RunState,
    pub command: Command,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub version: String,
    /// Checkpoints read by the run.
    pub inputs: Vec<Artifact>,
    /// Every file the run wrote, relative to the run directory.
    pub artifacts: Vec<Artifact>,
    /// Label reads on the target training split; always zero for adaptation commands.
    pub target_label_reads: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub rows: Vec<ResultRow>,
}

/// Hash of the resolved configuration (seeds included), used as the run directory name.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&canonical)[..6])
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .join(format!("{}-{}", cfg.command, run_id(cfg)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn collect_artifacts(root: &Path, dir: &Path, out: &mut Vec<Artifact>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_artifacts(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
            let rel = path
                .strip_prefix(root)
                .expect("inside root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(Artifact {
                path: rel,
                sha256: file_hash(&path)?,
            });
        }
    }
    Ok(())
}

/// Executes one configured command, writing every artifact under
/// `output_dir/<command>-<run id>` and keeping the manifest's state current.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let dir = run_dir(cfg);
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.is_file() {
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let previous: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "unreadable manifest {}: {e}",
                manifest_path.display()
            ))
        })?;
        // Through text on both sides, so f32 fields compare as written.
        let ours: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(cfg).expect("serializable"))
                .expect("valid json");
        if previous.get("config") != Some(&ours) {
            return Err(Error::Config(format!(
                "run id collision: {} holds a different configuration",
                dir.display()
            )));
        }
        // Same configuration: start from a clean directory so the rerun is reproducible.
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut manifest = Manifest {
        run_id: run_id(cfg),
        state: RunState::Running,
        command: cfg.command,
        seeds: cfg.seeds.clone(),
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: Vec::new(),
        artifacts: Vec::new(),
        target_label_reads: None,
        error: None,
    };
    for path in [&cfg.classifier_ckpt, &cfg.generator_ckpt]
        .into_iter()
        .flatten()
    {
        manifest.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256: file_hash(path)?,
        });
    }
    write_json(&manifest_path, &manifest)?;

    let outcome = execute(cfg, &dir, &mut manifest);
    let rows = match outcome {
        Ok(rows) => rows,
        Err(e) => {
            manifest.state = RunState::Failed;
            manifest.error = Some(e.to_string());
            write_json(&manifest_path, &manifest)?;
            return Err(e);
        }
    };
    if !rows.is_empty() {
        write_results_csv(&dir.join(RESULTS_CSV), &rows)?;
        let table = format_table(&rows);
        std::fs::write(dir.join(RESULTS_TXT), &table)
            .map_err(|e| Error::io(dir.join(RESULTS_TXT), e))?;
    }
    collect_artifacts(&dir, &dir, &mut manifest.artifacts)?;
    manifest.state = RunState::Completed;
    write_json(&manifest_path, &manifest)?;
    Ok(RunOutcome {
        run_dir: dir,
        manifest,
        rows,
    })
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
}

impl Context<'_> {
    fn load(&self, domain: Domain, split: Split) -> Result<Dataset> {
        let ds = domain.load(split, &self.cfg.data_root, &self.cfg.synthetic)?;
        if split == Split::Train && self.cfg.subsample < 1.0 {
            ds.subsample(self.cfg.subsample, self.cfg.synthetic.seed)
        } else {
            Ok(ds)
        }
    }

    fn source(&self) -> Domain {
        self.cfg.source.expect("validated")
    }

    fn target(&self) -> Domain {
        self.cfg.target.expect("validated")
    }

    fn source_name(&self) -> String {
        self.cfg
            .source
            .map_or_else(|| "source".to_string(), |d| d.to_string())
    }

    fn classifier(&self) -> Result<SourceClassifier> {
        let model = load_classifier(self.cfg.classifier_ckpt.as_ref().expect("validated"))?;
        if !model.is_frozen() {
            return Err(Error::Checkpoint(
                "classifier checkpoint is not frozen".into(),
            ));
        }
        Ok(model)
    }

    fn seeded(&self, base: &TrainConfig, seed: u64, dir: &Path) -> TrainConfig {
        TrainConfig {
            seed,
            checkpoint_dir: Some(dir.to_path_buf()),
            ..base.clone()
        }
    }

    fn row(&self, r: &crate::evaluation::EvalResult, target: &str, variant: &str) -> ResultRow {
        ResultRow::new(r, &self.source_name(), target, variant)
    }
}

fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

fn execute(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<Vec<ResultRow>> {
    let ctx = Context { cfg };
    let mut rows = Vec::new();
    match cfg.command {
        Command::TrainSource => {
            let train = ctx.load(ctx.source(), Split::Train)?;
            let test = ctx.load(ctx.source(), Split::Test)?;
            let target_test = cfg.target.map(|t| ctx.load(t, Split::Test)).transpose()?;
            for &seed in &cfg.seeds {
                let sd = seed_dir(dir, seed);
                let model =
                    train_source(&train, &cfg.classifier, &ctx.seeded(&cfg.train, seed, &sd))?;
                let r = evaluate(&model, None, &test)?.tagged(Pipeline::NoDa, seed);
                rows.push(ctx.row(&r, &ctx.source_name(), ""));
                if let (Some(t), Some(ds)) = (cfg.target, &target_test) {
                    let r = evaluate(&model, None, ds)?.tagged(Pipeline::NoDa, seed);
                    rows.push(ctx.row(&r, &t.to_string(), ""));
                }
            }
        }
        Command::TrainGenerator => {
            let model = ctx.classifier()?;
            let before = model.state_hash();
            let train = ctx.load(ctx.target(), Split::Train)?;
            for &seed in &cfg.seeds {
                let sd = seed_dir(dir, seed);
                train_generator(
                    &train,
                    &model,
                    &cfg.generator,
                    &ctx.seeded(&cfg.train, seed, &sd),
                )?;
            }
            check_unlabelled(&train, &model, &before, manifest)?;
        }
        Command::Adapt => {
            let model = ctx.classifier()?;
            let before = model.state_hash();
            let train = ctx.load(ctx.target(), Split::Train)?;
            let test = ctx.load(ctx.target(), Split::Test)?;
            let specs = cfg.pipeline_specs()?;
            let pretrained = cfg
                .generator_ckpt
                .as_ref()
                .map(|p| load_generator(p))
                .transpose()?;
            let target = ctx.target().to_string();
            for &seed in &cfg.seeds {
                let sd = seed_dir(dir, seed);
                let acfg = AdaptConfig {
                    generator_arch: cfg.generator.clone(),
                    generator: ctx.seeded(&cfg.train, seed, &sd),
                    finetune: cfg.finetune.clone(),
                    threshold: cfg.threshold,
                };
                let out = adapt(
                    &model,
                    &train,
                    &test,
                    &specs,
                    &acfg,
                    seed,
                    pretrained.as_ref(),
                )?;
                for (pipeline, set) in &out.pseudo_labels {
                    std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
                    set.save_csv(&sd.join(format!("pseudo-{pipeline}.csv")))?;
                }
                rows.extend(out.results.iter().map(|r| ctx.row(r, &target, "")));
            }
            check_unlabelled(&train, &model, &before, manifest)?;
            let significance = significance_vs_baseline(&rows)?;
            if !significance.is_empty() {
                write_json(&dir.join(SIGNIFICANCE_FILE), &significance)?;
            }
        }
        Command::Evaluate => {
            let model = ctx.classifier()?;
            let test = ctx.load(ctx.target(), Split::Test)?;
            let g = cfg
                .generator_ckpt
                .as_ref()
                .map(|p| load_generator(p))
                .transpose()?;
            let seed = cfg.seeds[0];
            let target = ctx.target().to_string();
            rows.push(ctx.row(
                &evaluate(&model, None, &test)?.tagged(Pipeline::NoDa, seed),
                &target,
                "",
            ));
            if let Some(g) = &g {
                let r = evaluate(&model, Some(g), &test)?.tagged(Pipeline::Translate, seed);
                rows.push(ctx.row(&r, &target, ""));
            }
        }
        Command::Ablate => {
            let model = ctx.classifier()?;
            let before = model.state_hash();
            let train = ctx.load(ctx.target(), Split::Train)?;
            let test = ctx.load(ctx.target(), Split::Test)?;
            let target = ctx.target().to_string();
            for &seed in &cfg.seeds {
                let sd = seed_dir(dir, seed);
                let table = run_ablation(
                    &train,
                    &test,
                    &model,
                    &cfg.generator,
                    &ctx.seeded(&cfg.train, seed, &sd),
                )?;
                rows.extend(
                    table
                        .iter()
                        .map(|r| ctx.row(&r.result, &target, r.variant.as_str())),
                );
            }
            check_unlabelled(&train, &model, &before, manifest)?;
        }
        Command::ExportGrid => {
            let g = load_generator(cfg.generator_ckpt.as_ref().expect("validated"))?;
            let test = ctx.load(ctx.target(), Split::Test)?;
            let n = cfg.grid_size.min(test.len());
            let idx: Vec<usize> = (0..n).collect();
            let x = test.gather(&idx)?;
            let translated = g.forward(&x)?;
            let source = match cfg.source {
                Some(s) => {
                    let ds = ctx.load(s, Split::Test)?;
                    Some(ds.gather(&(0..n.min(ds.len())).collect::<Vec<_>>())?)
                }
                None => None,
            };
            let source = source.filter(|s| s.dim() == x.dim());
            export_grid(&x, &translated, source.as_ref(), &dir.join(GRID_FILE))?;
        }
    }
    Ok(rows)
}

fn check_unlabelled(
    train: &Dataset,
    model: &SourceClassifier,
    before: &str,
    manifest: &mut Manifest,
) -> Result<()> {
    manifest.target_label_reads = Some(train.label_reads());
    if train.label_reads() != 0 {
        return Err(Error::Contract(format!(
            "target labels were read {} times during adaptation",
            train.label_reads()
        )));
    }
    if model.state_hash() != before {
        return Err(Error::Contract(
            "source classifier changed during adaptation".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pipeline: Pipeline,
    pub baseline: Pipeline,
    pub report: SignificanceReport,
}

/// Paired t-tests of every pipeline against `no_da` across seeds.
pub fn significance_vs_baseline(rows: &[ResultRow]) -> Result<Vec<Comparison>> {
    let by = |p: Pipeline| -> Vec<(u64, f64)> {
        rows.iter()
            .filter(|r| r.pipeline == p)
            .map(|r| (r.seed, r.accuracy))
            .collect()
    };
    let base = by(Pipeline::NoDa);
    let mut out = Vec::new();
    if base.len() < 2 {
        return Ok(out);
    }
    for p in Pipeline::ALL.into_iter().filter(|&p| p != Pipeline::NoDa) {
        let runs = by(p);
        if runs.len() != base.len() || runs.iter().zip(&base).any(|(a, b)| a.0 != b.0) {
            continue;
        }
        let a: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let b: Vec<f64> = base.iter().map(|r| r.1).collect();
        out.push(Comparison {
            pipeline: p,
            baseline: Pipeline::NoDa,
            report: paired_t_test(&a, &b)?,
        });
    }
    Ok(out)
}
