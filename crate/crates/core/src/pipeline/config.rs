use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer_gen::AnswerConfig;
use crate::error::{Error, Result};
use crate::instruction::ReadConfig;
use crate::nn::OptimizerConfig;
use crate::scene_graph::{EdgeSource, LookConfig};
use crate::worldgen::GenConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Annotated scene embeddings feed the engine; perception is frozen.
    VisualOracle,
    /// Gold programs replace the parser.
    ReadingOracle,
    EndToEnd,
    /// End-to-end with perturbed perception.
    Noisy,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::VisualOracle => "visual_oracle",
            Self::ReadingOracle => "reading_oracle",
            Self::EndToEnd => "end_to_end",
            Self::Noisy => "noisy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub look: f64,
    pub read: f64,
    pub think: f64,
    pub answer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            look: 1.0,
            read: 1.0,
            think: 1.0,
            answer: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Width `D` of object, edge, instruction and history vectors.
    pub dim: usize,
    pub engine_hidden: usize,
    /// Hidden ReLU layers in each engine feed-forward.
    pub engine_layers: usize,
    pub epochs: usize,
    /// Learning rate in the last epoch as a fraction of the initial one;
    /// the rate falls linearly in between.
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    /// Epochs at the start where gold programs feed the engine and the
    /// parser is pulled towards them.
    pub curriculum_epochs: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub look: LookConfig,
    pub read: ReadConfig,
    pub answer: AnswerConfig,
    pub data: GenConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::VisualOracle,
            seed: 11,
            dim: 64,
            engine_hidden: 64,
            engine_layers: 2,
            lr_final_fraction: 0.1,
            epochs: 60,
            batch_size: 32,
            curriculum_epochs: 2,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            look: LookConfig::default(),
            read: ReadConfig::default(),
            answer: AnswerConfig::default(),
            data: GenConfig::default(),
            data_dir: PathBuf::from("data/synthetic"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("dim", self.dim),
            ("engine_hidden", self.engine_hidden),
            ("engine_layers", self.engine_layers),
            ("look.slots", self.look.slots),
            ("read.max_steps", self.read.max_steps),
            ("answer.max_len", self.answer.max_len),
            ("batch_size", self.batch_size),
            ("read.heads", self.read.heads),
            ("answer.heads", self.answer.heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, h) in [("read.heads", self.read.heads), ("answer.heads", self.answer.heads)] {
            if !self.dim.is_multiple_of(h) {
                return Err(Error::Config(format!("dim {} not divisible by {name} {h}", self.dim)));
            }
        }
        let w = &self.weights;
        for (name, v) in [("look", w.look), ("read", w.read), ("think", w.think), ("answer", w.answer)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::Config("lr_final_fraction must be in [0, 1]".into()));
        }
        if self.look.lambda_box < 0.0 {
            return Err(Error::Config("look.lambda_box must be non-negative".into()));
        }
        if self.answer.max_steps < self.read.max_steps {
            return Err(Error::Config("answer.max_steps below read.max_steps".into()));
        }
        Ok(())
    }

    /// Perception settings implied by the mode.
    pub fn effective_look(&self) -> LookConfig {
        let mut look = self.look.clone();
        match self.mode {
            Mode::VisualOracle => {
                look.edge_source = EdgeSource::Annotated;
                look.noise_std = 0.0;
                look.slot_dropout = 0.0;
            }
            Mode::ReadingOracle | Mode::EndToEnd => {
                look.edge_source = EdgeSource::Learned;
                look.relation_evidence = true;
            }
            Mode::Noisy => {
                look.edge_source = EdgeSource::Learned;
                look.relation_evidence = true;
                if look.noise_std == 0.0 {
                    look.noise_std = 0.1;
                }
                if look.slot_dropout == 0.0 {
                    look.slot_dropout = 0.05;
                }
            }
        }
        look
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies dotted `key value` overrides. Values are read as JSON when
    /// they parse, otherwise as strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            set_path(&mut v, key, parse_value(raw))?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::Config("empty config key".into()))
}

/// Splits `--a.b value` pairs out of raw arguments.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got {a}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}
