//! Experiment configuration: a TOML document checked against a fixed schema,
//! overlaid with command-line flags, then resolved with per-command defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::baselines::{PipelineSpec, DEFAULT_THRESHOLD};
use crate::data::{Domain, Shift, ShiftKind, SyntheticSpec, DIGIT_CLASSES};
use crate::losses::LossWeights;
use crate::models::{ClassifierConfig, GeneratorConfig};
use crate::training::{OptimizerKind, Schedule, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainSource,
    TrainGenerator,
    Adapt,
    Evaluate,
    Ablate,
    ExportGrid,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::TrainSource,
        Command::TrainGenerator,
        Command::Adapt,
        Command::Evaluate,
        Command::Ablate,
        Command::ExportGrid,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::TrainSource => "train-source",
            Command::TrainGenerator => "train-generator",
            Command::Adapt => "adapt",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::ExportGrid => "export-grid",
        }
    }

    fn needs_classifier(&self) -> bool {
        !matches!(self, Command::TrainSource | Command::ExportGrid)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Str,
    Int,
    Float,
    Bool,
    IntList,
    FloatList,
    StrList,
}

impl Kind {
    fn name(&self) -> &'static str {
        match self {
            Kind::Str => "string",
            Kind::Int => "integer",
            Kind::Float => "number",
            Kind::Bool => "boolean",
            Kind::IntList => "list of integers",
            Kind::FloatList => "list of numbers",
            Kind::StrList => "list of strings",
        }
    }

    fn accepts(&self, v: &Value) -> bool {
        let list = |pred: fn(&Value) -> bool| v.as_array().is_some_and(|a| a.iter().all(pred));
        match self {
            Kind::Str => v.is_str(),
            Kind::Int => v.is_integer(),
            Kind::Float => v.is_float() || v.is_integer(),
            Kind::Bool => v.is_bool(),
            Kind::IntList => list(Value::is_integer),
            Kind::FloatList => list(|x| x.is_float() || x.is_integer()),
            Kind::StrList => list(Value::is_str),
        }
    }
}

const TRAIN_KEYS: &[(&str, Kind)] = &[
    ("epochs", Kind::Int),
    ("batch_size", Kind::Int),
    ("optimizer", Kind::Str),
    ("lr", Kind::Float),
    ("momentum", Kind::Float),
    ("schedule", Kind::Str),
    ("grad_clip", Kind::Float),
    ("no_grad_clip", Kind::Bool),
    ("lambda_content", Kind::Float),
    ("lambda_style", Kind::Float),
    ("lambda_entropy", Kind::Float),
];

const SCHEMA: &[(&str, &[(&str, Kind)])] = &[
    (
        "",
        &[
            ("command", Kind::Str),
            ("source", Kind::Str),
            ("target", Kind::Str),
            ("data_root", Kind::Str),
            ("output_dir", Kind::Str),
            ("seed", Kind::Int),
            ("seeds", Kind::IntList),
            ("classifier_ckpt", Kind::Str),
            ("generator_ckpt", Kind::Str),
            ("pipelines", Kind::StrList),
            ("subsample", Kind::Float),
            ("threshold", Kind::Float),
            ("grid_size", Kind::Int),
        ],
    ),
    ("train", TRAIN_KEYS),
    ("finetune", TRAIN_KEYS),
    (
        "classifier",
        &[
            ("preset", Kind::Str),
            ("widths", Kind::IntList),
            ("kernel", Kind::Int),
        ],
    ),
    (
        "generator",
        &[
            ("preset", Kind::Str),
            ("base_width", Kind::Int),
            ("res_blocks", Kind::Int),
            ("head_init_scale", Kind::Float),
        ],
    ),
    (
        "synthetic",
        &[
            ("n_per_class", Kind::Int),
            ("image_size", Kind::Int),
            ("seed", Kind::Int),
            ("tint", Kind::FloatList),
            ("brightness", Kind::Float),
            ("saturation", Kind::Float),
        ],
    ),
];

fn kind_of(path: &str) -> Option<Kind> {
    let (section, key) = path.split_once('.').unwrap_or(("", path));
    SCHEMA
        .iter()
        .find(|(s, _)| *s == section)
        .and_then(|(_, keys)| keys.iter().find(|(k, _)| *k == key))
        .map(|(_, kind)| *kind)
}

/// Flat `section.key -> value` settings before defaults are applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, Value>,
}

impl RawConfig {
    /// Parses a TOML document, reporting every unknown key and type mismatch at once.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("config is not valid TOML: {e}"))
        })?;
        let mut raw = Self::default();
        let mut problems = Vec::new();
        for (key, value) in doc {
            match value {
                Value::Table(table) if SCHEMA.iter().any(|(s, _)| *s == key) && !key.is_empty() => {
                    for (sub, v) in table {
                        raw.check_and_set(format!("{key}.{sub}"), v, &mut problems);
                    }
                }
                other => raw.check_and_set(key, other, &mut problems),
            }
        }
        if problems.is_empty() {
            Ok(raw)
        } else {
            Err(config_error(&problems))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn check_and_set(&mut self, path: String, value: Value, problems: &mut Vec<String>) {
        match kind_of(&path) {
            None => problems.push(format!("unknown key `{path}`")),
            Some(kind) if !kind.accepts(&value) => problems.push(format!(
                "`{path}`: expected {}, found {}",
                kind.name(),
                value.type_str()
            )),
            Some(_) => {
                self.values.insert(path, value);
            }
        }
    }

    /// Sets a value, overriding whatever the file said.
    pub fn set(&mut self, path: &str, value: impl Into<Value>) -> Result<()> {
        let value = value.into();
        let mut problems = Vec::new();
        self.check_and_set(path.to_string(), value, &mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(config_error(&problems))
        }
    }

    pub fn merge(&mut self, overrides: RawConfig) {
        self.values.extend(overrides.values);
    }

    fn str(&self, path: &str) -> Option<&str> {
        self.values.get(path).and_then(Value::as_str)
    }

    fn int(&self, path: &str) -> Option<i64> {
        self.values.get(path).and_then(Value::as_integer)
    }

    fn float(&self, path: &str) -> Option<f64> {
        self.values.get(path).map(|v| {
            v.as_float()
                .unwrap_or_else(|| v.as_integer().unwrap_or(0) as f64)
        })
    }

    fn bool(&self, path: &str) -> Option<bool> {
        self.values.get(path).and_then(Value::as_bool)
    }

    fn list(&self, path: &str) -> Option<&Vec<Value>> {
        self.values.get(path).and_then(Value::as_array)
    }
}

/// The message of an error without its category prefix.
fn detail(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Contract(m) => m.clone(),
        other => other.to_string(),
    }
}

fn config_error(problems: &[String]) -> Error {
    Error::Config(format!(
        "invalid configuration:\n  - {}",
        problems.join("\n  - ")
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub source: Option<Domain>,
    pub target: Option<Domain>,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Training settings of the command's main stage (source or generator training).
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub classifier: ClassifierConfig,
    pub generator: GeneratorConfig,
    pub synthetic: SyntheticSpec,
    pub classifier_ckpt: Option<PathBuf>,
    pub generator_ckpt: Option<PathBuf>,
    pub pipelines: Vec<String>,
    /// Fraction of each training split to use.
    pub subsample: f64,
    pub threshold: f64,
    pub grid_size: usize,
}

impl ExperimentConfig {
    pub fn pipeline_specs(&self) -> Result<Vec<PipelineSpec>> {
        self.pipelines.iter().map(|p| p.parse()).collect()
    }

    /// Applies defaults and checks every field, listing all problems together.
    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let mut p = Vec::new();
        let command = match raw.str("command") {
            None => {
                p.push("missing required key `command`".to_string());
                Command::Adapt
            }
            Some(c) => c.parse().unwrap_or_else(|e: Error| {
                p.push(detail(&e));
                Command::Adapt
            }),
        };
        let mut domain = |key: &str| {
            raw.str(key).and_then(|s| {
                s.parse::<Domain>()
                    .map_err(|e| p.push(format!("`{key}`: {}", detail(&e))))
                    .ok()
            })
        };
        let source = domain("source");
        let target = domain("target");

        let seeds: Vec<u64> = match (raw.list("seeds"), raw.int("seed")) {
            (Some(list), _) => list
                .iter()
                .filter_map(Value::as_integer)
                .map(|s| s as u64)
                .collect(),
            (None, Some(s)) => vec![s as u64],
            (None, None) => vec![0],
        };
        if seeds.is_empty() {
            p.push("`seeds` must not be empty".into());
        }
        if raw
            .list("seeds")
            .is_some_and(|l| l.iter().any(|v| v.as_integer().unwrap_or(0) < 0))
        {
            p.push("`seeds` must be non-negative".into());
        }

        let base = if command == Command::TrainSource {
            TrainConfig::source_defaults()
        } else {
            TrainConfig::generator_defaults()
        };
        let train = train_section(raw, "train", base, &mut p);
        let finetune = train_section(raw, "finetune", TrainConfig::finetune_defaults(), &mut p);

        let synthetic = synthetic_section(raw, &mut p);
        let image_size = match (source, target) {
            (Some(Domain::Digit(_)), _) | (None, Some(Domain::Digit(_))) => crate::data::DIGIT_SIZE,
            _ => synthetic.image_size,
        };
        let classifier = classifier_section(raw, image_size, &mut p);
        let generator = generator_section(raw, &mut p);

        let data_root = PathBuf::from(raw.str("data_root").unwrap_or("data"));
        let output_dir = PathBuf::from(raw.str("output_dir").unwrap_or("runs"));
        let classifier_ckpt = raw.str("classifier_ckpt").map(PathBuf::from);
        let generator_ckpt = raw.str("generator_ckpt").map(PathBuf::from);

        // Requirements that depend on the command.
        let needs_source = command == Command::TrainSource;
        if needs_source && source.is_none() {
            p.push(format!("`source` is required for {command}"));
        }
        if !needs_source && target.is_none() {
            p.push(format!("`target` is required for {command}"));
        }
        if command.needs_classifier() {
            match &classifier_ckpt {
                None => p.push(format!("`classifier_ckpt` is required for {command}")),
                Some(path) if !path.is_file() => p.push(format!(
                    "`classifier_ckpt`: {} does not exist",
                    path.display()
                )),
                _ => {}
            }
        }
        if command == Command::ExportGrid && generator_ckpt.is_none() {
            p.push("`generator_ckpt` is required for export-grid".into());
        }
        if let Some(path) = &generator_ckpt {
            if !path.is_file() {
                p.push(format!(
                    "`generator_ckpt`: {} does not exist",
                    path.display()
                ));
            }
        }
        let uses_digits = [source, target]
            .iter()
            .flatten()
            .any(Domain::needs_data_root);
        if uses_digits && !data_root.is_dir() {
            p.push(format!(
                "`data_root`: {} is not a directory",
                data_root.display()
            ));
        }

        let pipelines: Vec<String> = raw
            .list("pipelines")
            .map(|l| {
                l.iter()
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect()
            })
            .unwrap_or_else(|| vec!["no_da".into(), "translate".into()]);
        for spec in &pipelines {
            if let Err(e) = spec.parse::<PipelineSpec>().and_then(|s| s.resolve()) {
                p.push(format!("`pipelines`: {}", detail(&e)));
            }
        }
        let subsample = raw.float("subsample").unwrap_or(1.0);
        if !(subsample > 0.0 && subsample <= 1.0) {
            p.push(format!("`subsample` must be in (0, 1], got {subsample}"));
        }
        let threshold = raw.float("threshold").unwrap_or(DEFAULT_THRESHOLD);
        if !(threshold > 0.0 && threshold <= 1.0) {
            p.push(format!("`threshold` must be in (0, 1], got {threshold}"));
        }
        let grid_size = positive(raw, "grid_size", 8, &mut p);

        if p.is_empty() {
            Ok(Self {
                command,
                source,
                target,
                data_root,
                output_dir,
                seeds,
                train,
                finetune,
                classifier,
                generator,
                synthetic,
                classifier_ckpt,
                generator_ckpt,
                pipelines,
                subsample,
                threshold,
                grid_size,
            })
        } else {
            Err(config_error(&p))
        }
    }
}

fn positive(raw: &RawConfig, path: &str, default: usize, p: &mut Vec<String>) -> usize {
    match raw.int(path) {
        None => default,
        Some(v) if v >= 1 => v as usize,
        Some(v) => {
            p.push(format!("`{path}` must be at least 1, got {v}"));
            default
        }
    }
}

fn train_section(
    raw: &RawConfig,
    section: &str,
    base: TrainConfig,
    p: &mut Vec<String>,
) -> TrainConfig {
    let key = |k: &str| format!("{section}.{k}");
    let mut cfg = base;
    cfg.epochs = positive(raw, &key("epochs"), cfg.epochs, p);
    match raw.int(&key("batch_size")) {
        Some(b) if b >= 2 => cfg.batch_size = b as usize,
        Some(b) => p.push(format!(
            "`{}` must be at least 2, got {b}",
            key("batch_size")
        )),
        None => {}
    }
    if let Some(o) = raw.str(&key("optimizer")) {
        match o {
            "sgd" => cfg.optimizer = OptimizerKind::Sgd,
            "adam" => cfg.optimizer = OptimizerKind::Adam,
            other => p.push(format!(
                "`{}`: unknown optimizer `{other}` (sgd or adam)",
                key("optimizer")
            )),
        }
    }
    if let Some(s) = raw.str(&key("schedule")) {
        match s {
            "constant" => cfg.schedule = Schedule::Constant,
            "cosine" => cfg.schedule = Schedule::Cosine,
            other => p.push(format!(
                "`{}`: unknown schedule `{other}` (constant or cosine)",
                key("schedule")
            )),
        }
    }
    if let Some(lr) = raw.float(&key("lr")) {
        if lr > 0.0 && lr.is_finite() {
            cfg.lr = lr;
        } else {
            p.push(format!("`{}` must be positive, got {lr}", key("lr")));
        }
    }
    if let Some(m) = raw.float(&key("momentum")) {
        if (0.0..1.0).contains(&m) {
            cfg.momentum = m;
        } else {
            p.push(format!("`{}` must be in [0, 1), got {m}", key("momentum")));
        }
    }
    if let Some(c) = raw.float(&key("grad_clip")) {
        if c > 0.0 && c.is_finite() {
            cfg.grad_clip = Some(c);
        } else {
            p.push(format!("`{}` must be positive, got {c}", key("grad_clip")));
        }
    }
    if raw.bool(&key("no_grad_clip")) == Some(true) {
        cfg.grad_clip = None;
    }
    let w = LossWeights {
        content: raw
            .float(&key("lambda_content"))
            .unwrap_or(cfg.weights.content),
        style: raw.float(&key("lambda_style")).unwrap_or(cfg.weights.style),
        entropy: raw
            .float(&key("lambda_entropy"))
            .unwrap_or(cfg.weights.entropy),
    };
    match w.validate() {
        Ok(()) => cfg.weights = w,
        Err(e) => p.push(format!("`{section}`: {}", detail(&e))),
    }
    cfg
}

fn classifier_section(raw: &RawConfig, image_size: usize, p: &mut Vec<String>) -> ClassifierConfig {
    let mut cfg = match raw.str("classifier.preset").unwrap_or("paper") {
        "paper" => ClassifierConfig::default(),
        "small" => ClassifierConfig::small(),
        other => {
            p.push(format!(
                "`classifier.preset`: unknown preset `{other}` (paper or small)"
            ));
            ClassifierConfig::default()
        }
    };
    cfg.image_size = image_size;
    cfg.num_classes = DIGIT_CLASSES;
    if let Some(list) = raw.list("classifier.widths") {
        let widths: Vec<i64> = list.iter().filter_map(Value::as_integer).collect();
        if widths.len() == 3 && widths.iter().all(|&w| w >= 1) {
            cfg.widths = [widths[0] as usize, widths[1] as usize, widths[2] as usize];
        } else {
            p.push("`classifier.widths` must hold three positive integers".into());
        }
    }
    cfg.kernel = positive(raw, "classifier.kernel", cfg.kernel, p);
    if let Err(e) = cfg.validate() {
        p.push(format!("`classifier`: {}", detail(&e)));
    }
    cfg
}

fn generator_section(raw: &RawConfig, p: &mut Vec<String>) -> GeneratorConfig {
    let mut cfg = match raw.str("generator.preset").unwrap_or("paper") {
        "paper" => GeneratorConfig::default(),
        "small" => GeneratorConfig::small(),
        other => {
            p.push(format!(
                "`generator.preset`: unknown preset `{other}` (paper or small)"
            ));
            GeneratorConfig::default()
        }
    };
    cfg.base_width = positive(raw, "generator.base_width", cfg.base_width, p);
    if let Some(r) = raw.int("generator.res_blocks") {
        if r >= 0 {
            cfg.res_blocks = r as usize;
        } else {
            p.push(format!(
                "`generator.res_blocks` must be non-negative, got {r}"
            ));
        }
    }
    if let Some(s) = raw.float("generator.head_init_scale") {
        cfg.head_init_scale = s;
    }
    if let Err(e) = cfg.validate() {
        p.push(format!("`generator`: {}", detail(&e)));
    }
    cfg
}

fn synthetic_section(raw: &RawConfig, p: &mut Vec<String>) -> SyntheticSpec {
    let kind = ["target", "source"]
        .iter()
        .filter_map(|k| raw.str(k))
        .find_map(|s| match s.parse::<Domain>() {
            Ok(Domain::Synthetic(Some(kind))) => Some(kind),
            _ => None,
        })
        .unwrap_or(ShiftKind::ColorTint);
    let mut spec = SyntheticSpec::new(0, 100, kind);
    spec.n_per_class = positive(raw, "synthetic.n_per_class", spec.n_per_class, p);
    spec.image_size = positive(raw, "synthetic.image_size", spec.image_size, p);
    if let Some(s) = raw.int("synthetic.seed") {
        spec.seed = s as u64;
    }
    match kind {
        ShiftKind::ColorTint => {
            if let Some(t) = raw.list("synthetic.tint") {
                let t: Vec<f32> = t
                    .iter()
                    .map(|v| {
                        v.as_float()
                            .unwrap_or_else(|| v.as_integer().unwrap_or(0) as f64)
                            as f32
                    })
                    .collect();
                if t.len() == 3 {
                    spec.shift = Shift::ColorTint([t[0], t[1], t[2]]);
                } else {
                    p.push("`synthetic.tint` must hold three numbers".into());
                }
            }
        }
        ShiftKind::Brightness => {
            if let Some(b) = raw.float("synthetic.brightness") {
                spec.shift = Shift::Brightness(b as f32);
            }
        }
        ShiftKind::Saturation => {
            if let Some(s) = raw.float("synthetic.saturation") {
                spec.shift = Shift::Saturation(s as f32);
            }
        }
    }
    if let Err(e) = spec.validate() {
        p.push(format!("`synthetic`: {}", detail(&e)));
    }
    spec
}
