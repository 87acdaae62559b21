//! Run configuration stored as flat TOML.
//!
//! Every field is written back on save, defaults included, so a saved file
//! fully describes a run. Optional settings use sentinels to stay flat:
//! `batch_size = 0` trains full batch, `clip_norm = 0` disables clipping and
//! an empty `test` path means no test split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, InitKind, InitScheme};
use crate::error::{Error, Result};
use crate::network::HeadKind;
use crate::parallel::Execution;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset name (resolved under the UCR data directory) or a path to a
    /// dataset directory or training file.
    pub dataset: String,
    /// Explicit test file; empty to use the dataset's own test split.
    pub test: String,
    pub cell: CellKind,
    pub head: HeadKind,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub mean_pool: bool,
    pub init: InitKind,
    /// Zero-pad or truncate to this many steps; 0 keeps the data's length.
    pub horizon: usize,
    pub znorm: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub execution: Execution,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: String::new(),
            test: String::new(),
            cell: CellKind::Gru,
            head: HeadKind::NeuroView,
            hidden: 32,
            layers: 1,
            bidirectional: false,
            mean_pool: false,
            init: InitKind::Uniform,
            horizon: 0,
            znorm: false,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: 0,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: 0.0,
            seed: t.seed,
            execution: t.execution,
            output: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_note(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("`{name}` {msg}")));
        if self.hidden == 0 {
            return field("hidden", "must be at least 1");
        }
        if self.layers == 0 {
            return field("layers", "must be at least 1");
        }
        if !(self.clip_norm >= 0.0) {
            return field("clip_norm", "must be 0 (off) or positive");
        }
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string().trim_start_matches("config: ").to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            execution: self.execution,
        }
    }

    pub fn init_scheme(&self) -> InitScheme {
        InitScheme {
            kind: self.init,
            seed: self.seed,
        }
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => format!(" (line {})", text[..s.start.min(text.len())].matches('\n').count() + 1),
        None => String::new(),
    }
}
