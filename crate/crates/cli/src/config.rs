//! Run configuration: defaults, a flat `key = value` file format with JSON
//! scalar values, and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use gidnet_core::data::synth::{SynthConfig, SynthVariant};
use gidnet_core::gid::GidMode;
use gidnet_core::model::{Branches, FusionMode, ModelConfig, TrainConfig};
use gidnet_core::Error;
use serde::Serialize;
use serde_json::Value;

/// Every setting a command may read. Serialized verbatim into every output
/// file as the config echo.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub num_verbs: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub gid_mode: GidMode,
    pub fusion_mode: FusionMode,
    pub branches: Branches,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub variant: SynthVariant,
    pub distractors: usize,
    /// Minimum fused score `infer` reports.
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(3, 64);
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            dataset: None,
            num_verbs: model.num_verbs,
            image_size: model.image_size,
            embed_dim: model.embed_dim,
            hidden: model.hidden,
            gid_mode: model.gid_mode,
            fusion_mode: model.fusion_mode,
            branches: model.branches,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            iterations: train.iterations,
            seed: train.seed,
            out: PathBuf::from("out"),
            checkpoint: None,
            train_samples: synth.samples,
            test_samples: 16,
            variant: synth.variant,
            distractors: synth.distractors,
            threshold: 0.0,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "dataset",
    "num_verbs",
    "image_size",
    "embed_dim",
    "hidden",
    "gid_mode",
    "fusion_mode",
    "branches",
    "lr",
    "momentum",
    "weight_decay",
    "iterations",
    "seed",
    "out",
    "checkpoint",
    "train_samples",
    "test_samples",
    "variant",
    "distractors",
    "threshold",
];

fn as_str(v: &Value) -> Result<&str, String> {
    v.as_str().ok_or_else(|| format!("expected a string, found {v}"))
}

fn as_count(v: &Value) -> Result<usize, String> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| format!("expected a non-negative integer, found {v}"))
}

fn as_real(v: &Value) -> Result<f64, String> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("expected a finite number, found {v}"))
}

fn core_msg(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Set one key from a JSON scalar. The error names only the problem;
    /// callers add the location.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), String> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(as_str(v)?)),
            "num_verbs" => self.num_verbs = as_count(v)?,
            "image_size" => self.image_size = as_count(v)?,
            "embed_dim" => self.embed_dim = as_count(v)?,
            "hidden" => self.hidden = as_count(v)?,
            "gid_mode" => self.gid_mode = as_str(v)?.parse().map_err(core_msg)?,
            "fusion_mode" => self.fusion_mode = as_str(v)?.parse().map_err(core_msg)?,
            "branches" => self.branches = as_str(v)?.parse().map_err(core_msg)?,
            "lr" => self.lr = as_real(v)?,
            "momentum" => self.momentum = as_real(v)?,
            "weight_decay" => self.weight_decay = as_real(v)?,
            "iterations" => self.iterations = as_count(v)?,
            "seed" => self.seed = v.as_u64().ok_or_else(|| format!("expected a non-negative integer, found {v}"))?,
            "out" => self.out = PathBuf::from(as_str(v)?),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(as_str(v)?)),
            "train_samples" => self.train_samples = as_count(v)?,
            "test_samples" => self.test_samples = as_count(v)?,
            "variant" => {
                self.variant = match as_str(v)? {
                    "standard" => SynthVariant::Standard,
                    "contextual" => SynthVariant::Contextual,
                    other => return Err(format!("unknown variant `{other}` (expected standard or contextual)")),
                }
            }
            "distractors" => self.distractors = as_count(v)?,
            "threshold" => self.threshold = as_real(v)?,
            _ => return Err(format!("unknown key (expected one of {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Apply every assignment of a config file, in order.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `origin` prefixes error locations.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Error> {
        for (n, raw) in text.lines().enumerate() {
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", n + 1));
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(at("missing key before `=`".into()));
            }
            let value: Value = serde_json::from_str(value.trim())
                .map_err(|e| at(format!("key `{key}`: value is not a JSON scalar ({e})")))?;
            if value.is_array() || value.is_object() || value.is_null() {
                return Err(at(format!("key `{key}`: value must be a string, number or boolean")));
            }
            self.set(key, &value).map_err(|m| at(format!("key `{key}`: {m}")))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, Error> {
        let mut m = ModelConfig::new(self.num_verbs, self.image_size);
        m.embed_dim = self.embed_dim;
        m.hidden = self.hidden;
        m.gid_mode = self.gid_mode;
        m.fusion_mode = self.fusion_mode;
        m.branches = self.branches;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self, samples: usize, id_prefix: &str) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            num_verbs: self.num_verbs,
            samples,
            distractors: self.distractors,
            variant: self.variant,
            id_prefix: id_prefix.into(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.gidnet"))
    }

    pub fn dataset_path(&self) -> Result<&Path, Error> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (set `dataset` or pass --dataset)".into()))
    }

    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
