//! Training configuration and its flat `key = value` file format.
//!
//! Lines are `key = value` or `key value`; `#` starts a comment. Unknown
//! keys are rejected. Hyperparameter names follow the usual fine-tuning
//! spellings (`learning-rate`, `lora-rank`, `AdamW-beta1`, ...).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterConfig, AdapterTarget, ModelConfig};
use crate::optim::{AdamWConfig, Schedule};
use crate::text::TextLimits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub explicit_batch_size: usize,
    pub implicit_batch_size: usize,
    pub lambda: f64,
    pub margin: f64,
    pub temperature: f64,
    pub learn_temperature: bool,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub use_adapters: bool,
    pub adapter: AdapterConfig,
    pub max_description_length: usize,
    pub max_lm_length: usize,
    pub model: ModelConfig,
    /// Upper bound on vocabulary size (the model's vocab_size is set from
    /// the built vocabulary).
    pub vocab_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub eval_every_epoch: bool,
    pub checkpoint_every_epoch: bool,
    pub gradient_checkpointing: bool,
    pub bf16: bool,
    pub bnb_config: Option<String>,
    pub data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub probe_corpus: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            explicit_batch_size: 24,
            implicit_batch_size: 4,
            lambda: 0.1,
            margin: 0.02,
            temperature: 0.05,
            learn_temperature: true,
            learning_rate: 1e-4,
            schedule: Schedule::Cosine,
            optimizer: AdamWConfig::default(),
            use_adapters: false,
            adapter: AdapterConfig::default(),
            max_description_length: 50,
            max_lm_length: 256,
            model: ModelConfig::default(),
            vocab_size: 8192,
            seed: 0,
            max_steps: None,
            eval_every_epoch: true,
            checkpoint_every_epoch: true,
            gradient_checkpointing: false,
            bf16: false,
            bnb_config: None,
            data: None,
            output_dir: None,
            probe_corpus: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn optional(v: &str) -> Option<&str> {
    match v.to_ascii_lowercase().as_str() {
        "" | "none" | "null" => None,
        _ => Some(v),
    }
}

impl TrainConfig {
    pub fn limits(&self) -> TextLimits {
        TextLimits {
            max_description_length: self.max_description_length,
            max_lm_length: self.max_lm_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.explicit_batch_size < 2 {
            return bad(format!(
                "explicit-alignment-batch-size must be >= 2, got {}",
                self.explicit_batch_size
            ));
        }
        if self.implicit_batch_size < 1 {
            return bad("implicit-alignment-batch-size must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning-rate must be > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.max_description_length == 0 {
            return bad("max-description-length must be >= 1".into());
        }
        if self.max_lm_length > self.model.max_seq_len {
            return bad(format!(
                "max-language-modeling-length {} exceeds max-seq-len {}",
                self.max_lm_length, self.model.max_seq_len
            ));
        }
        if 2 * self.max_description_length + 2 > self.model.max_seq_len {
            return bad(format!(
                "max-description-length {} does not fit max-seq-len {}",
                self.max_description_length, self.model.max_seq_len
            ));
        }
        let mut m = self.model;
        m.vocab_size = m.vocab_size.max(1);
        m.validate()
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse_num(key, v)?,
            "explicit-alignment-batch-size" => self.explicit_batch_size = parse_num(key, v)?,
            "implicit-alignment-batch-size" => self.implicit_batch_size = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "margin" => self.margin = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "learn-temperature" => self.learn_temperature = parse_bool(key, v)?,
            "learning-rate" => self.learning_rate = parse_num(key, v)?,
            "LR-scheduler-type" | "LR-sheduler-type" => self.schedule = Schedule::parse(v)?,
            "optimizer" => {
                if !v.eq_ignore_ascii_case("adamw") {
                    return Err(Error::Config(format!("optimizer: only AdamW is supported, got '{v}'")));
                }
            }
            "AdamW-beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "AdamW-beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "AdamW-eps" => self.optimizer.eps = parse_num(key, v)?,
            "weight-decay" => self.optimizer.weight_decay = parse_num(key, v)?,
            "use-lora" => self.use_adapters = parse_bool(key, v)?,
            "lora-module" => self.adapter.target = AdapterTarget::parse(v)?,
            "lora-alpha" => self.adapter.alpha = parse_num(key, v)?,
            "lora-dropout" | "lora-drouout" => self.adapter.dropout = parse_num(key, v)?,
            "lora-rank" => self.adapter.rank = parse_num(key, v)?,
            "max-description-length" => self.max_description_length = parse_num(key, v)?,
            "max-language-modeling-length" => self.max_lm_length = parse_num(key, v)?,
            "n-layers" => self.model.n_layers = parse_num(key, v)?,
            "d-model" => self.model.d_model = parse_num(key, v)?,
            "n-heads" => self.model.n_heads = parse_num(key, v)?,
            "d-ff" => self.model.d_ff = parse_num(key, v)?,
            "max-seq-len" => self.model.max_seq_len = parse_num(key, v)?,
            "vocab-size" => self.vocab_size = parse_num(key, v)?,
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.model.seed = self.seed;
            }
            "max-steps" => self.max_steps = optional(v).map(|s| parse_num(key, s)).transpose()?,
            "eval-every-epoch" => self.eval_every_epoch = parse_bool(key, v)?,
            "checkpoint-every-epoch" => self.checkpoint_every_epoch = parse_bool(key, v)?,
            "gradient-checkpointing" => self.gradient_checkpointing = parse_bool(key, v)?,
            "bf16" => self.bf16 = parse_bool(key, v)?,
            "bnb-config" => self.bnb_config = optional(v).map(str::to_string),
            "data" => self.data = optional(v).map(PathBuf::from),
            "output-dir" => self.output_dir = optional(v).map(PathBuf::from),
            "probe-corpus" => self.probe_corpus = optional(v).map(PathBuf::from),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => line
                    .split_once(char::is_whitespace)
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .unwrap_or((line, "")),
            };
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every setting as `(key, value)`, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        vec![
            ("epochs", self.epochs.to_string()),
            ("explicit-alignment-batch-size", self.explicit_batch_size.to_string()),
            ("implicit-alignment-batch-size", self.implicit_batch_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("margin", self.margin.to_string()),
            ("temperature", self.temperature.to_string()),
            ("learn-temperature", self.learn_temperature.to_string()),
            ("learning-rate", self.learning_rate.to_string()),
            ("LR-scheduler-type", self.schedule.as_str().to_string()),
            ("optimizer", "AdamW".to_string()),
            ("AdamW-beta1", self.optimizer.beta1.to_string()),
            ("AdamW-beta2", self.optimizer.beta2.to_string()),
            ("AdamW-eps", self.optimizer.eps.to_string()),
            ("weight-decay", self.optimizer.weight_decay.to_string()),
            ("use-lora", self.use_adapters.to_string()),
            ("lora-module", self.adapter.target.as_str().to_string()),
            ("lora-alpha", self.adapter.alpha.to_string()),
            ("lora-dropout", self.adapter.dropout.to_string()),
            ("lora-rank", self.adapter.rank.to_string()),
            ("max-description-length", self.max_description_length.to_string()),
            ("max-language-modeling-length", self.max_lm_length.to_string()),
            ("n-layers", self.model.n_layers.to_string()),
            ("d-model", self.model.d_model.to_string()),
            ("n-heads", self.model.n_heads.to_string()),
            ("d-ff", self.model.d_ff.to_string()),
            ("max-seq-len", self.model.max_seq_len.to_string()),
            ("vocab-size", self.vocab_size.to_string()),
            ("seed", self.seed.to_string()),
            ("max-steps", self.max_steps.map_or("none".to_string(), |s| s.to_string())),
            ("eval-every-epoch", self.eval_every_epoch.to_string()),
            ("checkpoint-every-epoch", self.checkpoint_every_epoch.to_string()),
            ("gradient-checkpointing", self.gradient_checkpointing.to_string()),
            ("bf16", self.bf16.to_string()),
            ("bnb-config", self.bnb_config.clone().unwrap_or_else(|| "none".into())),
            ("data", opt(&self.data)),
            ("output-dir", opt(&self.output_dir)),
            ("probe-corpus", opt(&self.probe_corpus)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Settings that differ from `other`, as `(key, old, new)`.
    pub fn delta(&self, other: &TrainConfig) -> Vec<(String, String, String)> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| (k.to_string(), a, b))
            .collect()
    }
}
