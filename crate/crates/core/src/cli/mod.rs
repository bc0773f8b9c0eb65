//! Command-line front end: a TOML config file overlaid with flags.

mod config;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use toml::Value;

pub use config::{Command, ExperimentConfig, RawConfig};
pub use run::{
    run, run_dir, run_id, significance_vs_baseline, Artifact, Comparison, Manifest, RunOutcome,
    RunState, GRID_FILE, MANIFEST_FILE, RESULTS_CSV, RESULTS_TXT, SIGNIFICANCE_FILE,
};

use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Source-free domain adaptation by translating target images toward the source domain.
#[derive(Debug, Parser)]
#[command(name = "sourcefree", version, allow_negative_numbers = true)]
pub struct Flags {
    /// train-source, train-generator, adapt, evaluate, ablate or export-grid.
    pub command: Option<String>,
    /// TOML file with experiment settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source domain: mnist, usps, svhn, synth or synth-<shift>.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub data_root: Option<String>,
    #[arg(long)]
    pub output_dir: Option<String>,
    #[arg(long)]
    pub seed: Option<i64>,
    /// Comma-separated seeds; every seed gets its own run.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<i64>>,
    #[arg(long)]
    pub epochs: Option<i64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<i64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lambda_content: Option<f64>,
    #[arg(long)]
    pub lambda_style: Option<f64>,
    #[arg(long)]
    pub lambda_entropy: Option<f64>,
    /// Disables gradient-norm clipping.
    #[arg(long)]
    pub no_grad_clip: bool,
    #[arg(long)]
    pub classifier_ckpt: Option<String>,
    #[arg(long)]
    pub generator_ckpt: Option<String>,
    /// Comma-separated pipelines, e.g. `no_da,translate,translate+finetune`.
    #[arg(long, value_delimiter = ',')]
    pub pipelines: Option<Vec<String>>,
    /// Fraction of each training split to use.
    #[arg(long)]
    pub subsample: Option<f64>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub grid_size: Option<i64>,
}

impl Flags {
    /// Flags as config overrides.
    pub fn overrides(&self) -> Result<RawConfig> {
        let mut raw = RawConfig::default();
        let strings = [
            ("command", &self.command),
            ("source", &self.source),
            ("target", &self.target),
            ("data_root", &self.data_root),
            ("output_dir", &self.output_dir),
            ("classifier_ckpt", &self.classifier_ckpt),
            ("generator_ckpt", &self.generator_ckpt),
            ("train.optimizer", &self.optimizer),
        ];
        for (key, v) in strings {
            if let Some(v) = v {
                raw.set(key, v.as_str())?;
            }
        }
        let ints = [
            ("seed", self.seed),
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("grid_size", self.grid_size),
        ];
        for (key, v) in ints {
            if let Some(v) = v {
                raw.set(key, v)?;
            }
        }
        let floats = [
            ("train.lr", self.lr),
            ("train.lambda_content", self.lambda_content),
            ("train.lambda_style", self.lambda_style),
            ("train.lambda_entropy", self.lambda_entropy),
            ("subsample", self.subsample),
            ("threshold", self.threshold),
        ];
        for (key, v) in floats {
            if let Some(v) = v {
                raw.set(key, v)?;
            }
        }
        if self.no_grad_clip {
            raw.set("train.no_grad_clip", true)?;
        }
        if let Some(seeds) = &self.seeds {
            raw.set(
                "seeds",
                Value::Array(seeds.iter().map(|&s| Value::Integer(s)).collect()),
            )?;
        }
        if let Some(p) = &self.pipelines {
            raw.set(
                "pipelines",
                Value::Array(p.iter().map(|s| Value::String(s.clone())).collect()),
            )?;
        }
        Ok(raw)
    }

    /// Reads the config file (if any) and overlays the flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::from_file(path)?,
            None => RawConfig::default(),
        };
        raw.merge(self.overrides()?);
        ExperimentConfig::resolve(&raw)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let flags = match Flags::try_parse_from(args) {
        Ok(f) => f,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match flags.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match run(&cfg) {
        Ok(out) => {
            if !out.rows.is_empty() {
                print!("{}", crate::evaluation::format_table(&out.rows));
            }
            println!("run directory: {}", out.run_dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
