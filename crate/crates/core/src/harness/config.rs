use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::{CrossFrameVariant, ModelConfig};
use crate::error::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STAN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Retrieval,
    Recognition,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Retrieval => "retrieval",
            Task::Recognition => "recognition",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Task::Retrieval),
            "recognition" => Ok(Task::Recognition),
            _ => Err(Error::Config(format!("unknown task {s:?} (retrieval | recognition)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (cosine)"))),
        }
    }
}

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    /// Kept for completeness; the backbone is frozen and never updated.
    pub lr_backbone: f64,
    pub lr_branch: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Training clips; generated from the seed when absent.
    pub dataset: Option<PathBuf>,
    /// Evaluation clips; generated from the seed when absent.
    pub test_dataset: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub use_dsl: bool,
    pub dsl_temperature: f64,
    /// Generated training clips per class.
    pub train_per_class: usize,
    /// Generated recognition test clips per class.
    pub test_per_class: usize,
    /// Write measured wall time into reports instead of 0.
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: Task::Recognition,
            epochs: 12,
            batch_size: 16,
            lr_backbone: 2e-6,
            lr_branch: 3e-3,
            weight_decay: 0.02,
            schedule: Schedule::Cosine,
            seed: 0,
            dataset: None,
            test_dataset: None,
            report: None,
            use_dsl: false,
            dsl_temperature: 1.0,
            train_per_class: 64,
            test_per_class: 16,
            record_time: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// Every key accepted by [`RunConfig::set`], in snake case.
pub const KEYS: &[&str] = &[
    "task",
    "epochs",
    "batch_size",
    "lr_backbone",
    "lr_branch",
    "weight_decay",
    "schedule",
    "seed",
    "dataset",
    "test_dataset",
    "report",
    "use_dsl",
    "dsl_temperature",
    "train_per_class",
    "test_per_class",
    "record_time",
    "frames",
    "grid_h",
    "grid_w",
    "patch_size",
    "dim",
    "depth",
    "heads",
    "branch_layers",
    "level_interval",
    "level_range_end",
    "variant",
    "use_cross_frame",
    "use_intra_frame",
    "use_branch",
    "use_multilevel",
    "dropout",
    "zero_init_branch",
    "intra_init_from_backbone",
    "text_vocab",
    "text_len",
    "text_depth",
    "nce_temperature",
];

impl RunConfig {
    /// Sets one field by name; `-` and `_` are interchangeable in keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        let m = &mut self.model;
        match k {
            "task" => self.task = v.parse()?,
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "lr_backbone" => self.lr_backbone = parse(k, v)?,
            "lr_branch" => self.lr_branch = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "schedule" => self.schedule = v.parse()?,
            "seed" => self.seed = parse(k, v)?,
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "test_dataset" => self.test_dataset = Some(PathBuf::from(v)),
            "report" => self.report = Some(PathBuf::from(v)),
            "use_dsl" => self.use_dsl = parse_bool(k, v)?,
            "dsl_temperature" => self.dsl_temperature = parse(k, v)?,
            "train_per_class" => self.train_per_class = parse(k, v)?,
            "test_per_class" => self.test_per_class = parse(k, v)?,
            "record_time" => self.record_time = parse_bool(k, v)?,
            "frames" => m.frames = parse(k, v)?,
            "grid_h" => m.grid_h = parse(k, v)?,
            "grid_w" => m.grid_w = parse(k, v)?,
            "patch_size" => m.patch_size = parse(k, v)?,
            "dim" => m.dim = parse(k, v)?,
            "depth" => m.depth = parse(k, v)?,
            "heads" => m.heads = parse(k, v)?,
            "branch_layers" => m.branch_layers = parse(k, v)?,
            "level_interval" => m.level_interval = parse(k, v)?,
            "level_range_end" => m.level_range_end = parse(k, v)?,
            "variant" => m.cross_frame_variant = v.parse::<CrossFrameVariant>()?,
            "use_cross_frame" => m.switches.cross_frame = parse_bool(k, v)?,
            "use_intra_frame" => m.switches.intra_frame = parse_bool(k, v)?,
            "use_branch" => m.switches.branch = parse_bool(k, v)?,
            "use_multilevel" => m.switches.multilevel = parse_bool(k, v)?,
            "dropout" => m.dropout_p = parse(k, v)?,
            "zero_init_branch" => m.zero_init_branch = parse_bool(k, v)?,
            "intra_init_from_backbone" => m.intra_init_from_backbone = parse_bool(k, v)?,
            "text_vocab" => m.text_vocab = parse(k, v)?,
            "text_len" => m.text_len = parse(k, v)?,
            "text_depth" => m.text_depth = parse(k, v)?,
            "nce_temperature" => m.nce_temperature = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.apply_text(&fs::read_to_string(path)?)
    }

    /// Seed from [`SEED_ENV`], if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr_branch > 0.0) {
            return Err(Error::Config(format!("lr_branch must be > 0, got {}", self.lr_branch)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.use_dsl && self.task == Task::Recognition {
            return Err(Error::Usage("dual-softmax applies to retrieval only".into()));
        }
        if !(self.dsl_temperature > 0.0) {
            return Err(Error::Config("dsl temperature must be > 0".into()));
        }
        if self.model.channels != 1 {
            return Err(Error::Config("synthetic clips have a single channel".into()));
        }
        if self.model.text_vocab < crate::synthdata::MIN_VOCAB
            || self.model.text_len < crate::synthdata::CAPTION_LEN
        {
            return Err(Error::Config(format!(
                "text encoder needs vocab >= {} and length >= {}",
                crate::synthdata::MIN_VOCAB,
                crate::synthdata::CAPTION_LEN
            )));
        }
        Ok(())
    }

    /// `key = value` lines that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = vec![
            ("task", self.task.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_backbone", self.lr_backbone.to_string()),
            ("lr_branch", self.lr_branch.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("schedule", "cosine".to_string()),
            ("seed", self.seed.to_string()),
            ("use_dsl", self.use_dsl.to_string()),
            ("dsl_temperature", self.dsl_temperature.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("record_time", self.record_time.to_string()),
            ("frames", m.frames.to_string()),
            ("grid_h", m.grid_h.to_string()),
            ("grid_w", m.grid_w.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("dim", m.dim.to_string()),
            ("depth", m.depth.to_string()),
            ("heads", m.heads.to_string()),
            ("branch_layers", m.branch_layers.to_string()),
            ("level_interval", m.level_interval.to_string()),
            ("level_range_end", m.level_range_end.to_string()),
            ("variant", m.cross_frame_variant.to_string()),
            ("use_cross_frame", m.switches.cross_frame.to_string()),
            ("use_intra_frame", m.switches.intra_frame.to_string()),
            ("use_branch", m.switches.branch.to_string()),
            ("use_multilevel", m.switches.multilevel.to_string()),
            ("dropout", m.dropout_p.to_string()),
            ("zero_init_branch", m.zero_init_branch.to_string()),
            ("intra_init_from_backbone", m.intra_init_from_backbone.to_string()),
            ("text_vocab", m.text_vocab.to_string()),
            ("text_len", m.text_len.to_string()),
            ("text_depth", m.text_depth.to_string()),
            ("nce_temperature", m.nce_temperature.to_string()),
        ];
        for (k, p) in [
            ("dataset", path(&self.dataset)),
            ("test_dataset", path(&self.test_dataset)),
            ("report", path(&self.report)),
        ] {
            if let Some(p) = p {
                lines.push((k, p));
            }
        }
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
