//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LrSchedule, ModelSpec, TrainConfig};
use crate::pruning::PruneConfig;
use crate::quant::QuantConfig;
use crate::scenario::{BlobParams, ScenarioKind};

/// Which stages of the per-task pipeline run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Population search, then adaptive quantization.
    #[default]
    Full,
    /// Population search; weights stored as raw 32-bit values.
    PruningOnly,
    /// Every available slot is used; weights are quantized.
    QuantizationOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::PruningOnly => "pruning-only",
            Mode::QuantizationOnly => "quantization-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "pruning-only" => Ok(Mode::PruningOnly),
            "quantization-only" => Ok(Mode::QuantizationOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full, pruning-only or quantization-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Root of every random stream used for training and quantization.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Directory with the four MNIST IDX files (permuted and split kinds).
    pub mnist_dir: PathBuf,
    /// Task count for permuted and synthetic kinds.
    pub n_tasks: usize,
    /// Classes per task for the split kind.
    pub classes_per_task: usize,
    pub seed: u64,
    pub blobs: BlobParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Permuted,
            mnist_dir: PathBuf::from("data/mnist"),
            n_tasks: 3,
            classes_per_task: 5,
            seed: 0,
            blobs: BlobParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input size, hidden sizes, output size.
    pub layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: vec![784, 100, 10],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: LrSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: LrSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub quant: QuantConfig,
    pub train: TrainSection,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

impl RunConfig {
    /// Parses `text`, applies `overrides` (each `dotted.key=value`) and
    /// validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg = Self::parse(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`RunConfig::from_toml`] without the validation step.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.model.layers.clone())
    }

    /// Training settings for one call; `epochs` and `seed` vary per call.
    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed,
        }
    }

    /// The pruning settings with the mode's adjustments and the run seed.
    pub fn effective_prune(&self) -> PruneConfig {
        let mut p = PruneConfig {
            seed: self.run.seed,
            ..self.prune
        };
        match self.run.mode {
            Mode::Full => {}
            Mode::PruningOnly => p.min_bits = crate::mask::SLOT_BITS,
            Mode::QuantizationOnly => {
                p.population = 1;
                p.v_min = 0.0;
                p.v_max = 0.0;
            }
        }
        p
    }

    pub fn effective_quant(&self) -> QuantConfig {
        QuantConfig {
            seed: self.run.seed,
            ..self.quant
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        self.quant.validate()?;
        self.train_config(1, 0).validate()?;
        let spec = self.model_spec()?;
        let s = &self.scenario;
        match s.kind {
            ScenarioKind::Permuted | ScenarioKind::Split => {
                for f in MNIST_FILES {
                    let p = s.mnist_dir.join(f);
                    if !p.is_file() {
                        return Err(Error::Config(format!(
                            "scenario.mnist_dir: {} not found",
                            p.display()
                        )));
                    }
                }
            }
            ScenarioKind::Synthetic => {
                if spec.input_dim() != s.blobs.dim {
                    return Err(Error::Config(format!(
                        "model input size {} does not match scenario.blobs.dim {}",
                        spec.input_dim(),
                        s.blobs.dim
                    )));
                }
            }
        }
        if s.kind != ScenarioKind::Split && s.n_tasks == 0 {
            return Err(Error::Config("scenario.n_tasks must be at least 1".into()));
        }
        let classes = match s.kind {
            ScenarioKind::Permuted => None,
            ScenarioKind::Split => Some(s.classes_per_task),
            ScenarioKind::Synthetic => Some(s.blobs.classes),
        };
        if let Some(c) = classes {
            if c != spec.output_dim() {
                return Err(Error::Config(format!(
                    "model output size {} does not match {c} classes per task",
                    spec.output_dim()
                )));
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c=value`, creating intermediate tables. Values are read as TOML
/// (numbers, booleans, arrays, quoted strings); anything else is a string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} does not name a table entry")))?;
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
