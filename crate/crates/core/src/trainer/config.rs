use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Profile, Strategy, WeightingConfig};
use crate::model::ModelConfig;
use crate::overassoc::parse_buckets;
use crate::textnorm::Language;

/// Objective of the warm-up phase that precedes model-based weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupStrategy {
    Ce,
    DataWeight,
}

impl fmt::Display for WarmupStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarmupStrategy::Ce => "ce",
            WarmupStrategy::DataWeight => "data_weight",
        })
    }
}

impl FromStr for WarmupStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(WarmupStrategy::Ce),
            "data_weight" => Ok(WarmupStrategy::DataWeight),
            other => Err(Error::Config(format!(
                "unknown warmup_strategy {other:?} (expected ce or data_weight)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weighting: WeightingConfig,
    pub learning_rate: f64,
    /// Learning rate of the model-based phase; `None` reuses `learning_rate`.
    pub finetune_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// 0 evaluates once per epoch.
    pub eval_every_steps: usize,
    pub seed: u64,
    pub warmup_strategy: WarmupStrategy,
    /// Evaluations without dev Sum improvement before a phase stops.
    pub patience: usize,
    /// Beam width used to decode dev predictions.
    pub eval_beam: usize,
    pub lang: Language,
    /// Run a model-based strategy without a warm-up phase.
    pub allow_cold_start: bool,
    /// The model passed to `train` is already a warm-start checkpoint.
    pub warm_started: bool,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Mean wholeseq reward below which a warning is recorded.
    pub low_reward_threshold: f64,
    pub min_count: usize,
    pub model: ModelConfig,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Strategy::Ce, Profile::Woi)
    }
}

impl TrainConfig {
    /// Paper defaults for a dataset profile: batch 64 / 16, English / Chinese.
    pub fn for_profile(strategy: Strategy, profile: Profile) -> Self {
        let (batch_size, lang) = match profile {
            Profile::Woi => (64, Language::En),
            Profile::Dusinc => (16, Language::Zh),
        };
        let warmup_strategy = if strategy == Strategy::Combine {
            WarmupStrategy::DataWeight
        } else {
            WarmupStrategy::Ce
        };
        Self {
            weighting: WeightingConfig::for_profile(strategy, profile),
            learning_rate: 5e-5,
            finetune_learning_rate: None,
            batch_size,
            max_epochs: 20,
            eval_every_steps: 0,
            seed: 0,
            warmup_strategy,
            patience: 5,
            eval_beam: 4,
            lang,
            allow_cold_start: false,
            warm_started: false,
            max_grad_norm: 5.0,
            low_reward_threshold: 0.05,
            min_count: 1,
            model: ModelConfig::default(),
            train_path: None,
            dev_path: None,
            out_dir: None,
            init_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weighting.validate()?;
        self.model.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        if let Some(lr) = self.finetune_learning_rate {
            positive("finetune_learning_rate", lr)?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.eval_beam == 0 {
            return Err(Error::Config("eval_beam must be >= 1".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::Config("max_grad_norm must be >= 0".into()));
        }
        if self.weighting.strategy == Strategy::Combine && self.warmup_strategy != WarmupStrategy::DataWeight {
            return Err(Error::Config("strategy combine requires warmup_strategy = data_weight".into()));
        }
        Ok(())
    }

    /// Effective learning rate of the model-based phase.
    pub fn finetune_lr(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(self.learning_rate)
    }

    /// Reads a flat `key = value` file. Paths are resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_entries(&read_entries(path)?)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        Self::from_entries(&parse_entries(text, origin)?)
    }

    /// Builds a config from parsed entries. `profile` and `strategy` are
    /// applied first so other keys override their defaults regardless of
    /// order.
    pub fn from_entries(entries: &ConfigEntries) -> Result<Self> {
        let strategy = match entries.get("strategy") {
            Some(e) => e.value.parse().map_err(|err| e.error("strategy", err))?,
            None => Strategy::Ce,
        };
        let profile = match entries.get("profile") {
            Some(e) => e.value.parse().map_err(|err| e.error("profile", err))?,
            None => Profile::Woi,
        };
        let mut cfg = Self::for_profile(strategy, profile);
        for (key, e) in entries {
            cfg.set(key, &e.value).map_err(|err| e.error(key, err))?;
        }
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value {v:?}")))
        }
        fn flag(v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {v:?}"))),
            }
        }
        fn opt_path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        match key {
            "profile" | "strategy" => {}
            "alpha" => self.weighting.alpha = num(value)?,
            "beta" => self.weighting.beta = num(value)?,
            "kappa" => self.weighting.kappa = num(value)?,
            "scoring_fn" => self.weighting.scoring_fn = value.parse()?,
            "prune_keep_buckets" => self.weighting.prune_keep_buckets = parse_buckets(value)?,
            "learning_rate" => self.learning_rate = num(value)?,
            "finetune_learning_rate" => self.finetune_learning_rate = Some(num(value)?),
            "batch_size" => self.batch_size = num(value)?,
            "max_epochs" => self.max_epochs = num(value)?,
            "eval_every_steps" => self.eval_every_steps = num(value)?,
            "seed" => self.seed = num(value)?,
            "warmup_strategy" => self.warmup_strategy = value.parse()?,
            "patience" => self.patience = num(value)?,
            "eval_beam" => self.eval_beam = num(value)?,
            "lang" => self.lang = value.parse()?,
            "allow_cold_start" => self.allow_cold_start = flag(value)?,
            "warm_started" => self.warm_started = flag(value)?,
            "max_grad_norm" => self.max_grad_norm = num(value)?,
            "low_reward_threshold" => self.low_reward_threshold = num(value)?,
            "min_count" => self.min_count = num(value)?,
            "embed_dim" => self.model.embed_dim = num(value)?,
            "hidden_dim" => self.model.hidden_dim = num(value)?,
            "pos_dim" => self.model.pos_dim = num(value)?,
            "max_input_len" => self.model.max_input_len = num(value)?,
            "max_output_len" => self.model.max_output_len = num(value)?,
            "zero_output_init" => self.model.zero_output_init = flag(value)?,
            "model_seed" => self.model.seed = num(value)?,
            "train" => self.train_path = opt_path(value),
            "dev" => self.dev_path = opt_path(value),
            "out_dir" => self.out_dir = opt_path(value),
            "init_checkpoint" => self.init_checkpoint = opt_path(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

/// One `key = value` setting and where it came from (`file:line` or a
/// command-line flag).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub value: String,
    pub origin: String,
}

impl ConfigEntry {
    fn error(&self, key: &str, e: Error) -> Error {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        Error::Config(format!("{}: {key}: {msg}", self.origin))
    }
}

pub type ConfigEntries = BTreeMap<String, ConfigEntry>;

pub fn parse_entries(text: &str, origin: &str) -> Result<ConfigEntries> {
    let mut entries = ConfigEntries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.into(),
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("{origin}:{}: unknown key {key:?}", i + 1)));
        }
        let entry = ConfigEntry {
            value: value.trim().to_string(),
            origin: format!("{origin}:{}", i + 1),
        };
        if entries.insert(key.clone(), entry).is_some() {
            return Err(Error::Config(format!("{origin}:{}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(entries)
}

/// Reads a config file into entries, resolving relative path values
/// against the file's directory.
pub fn read_entries(path: &Path) -> Result<ConfigEntries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = parse_entries(&text, &path.display().to_string())?;
    if let Some(base) = path.parent() {
        for key in PATH_KEYS {
            if let Some(e) = entries.get_mut(*key) {
                if !e.value.is_empty() && Path::new(&e.value).is_relative() {
                    e.value = base.join(&e.value).display().to_string();
                }
            }
        }
    }
    Ok(entries)
}

const PATH_KEYS: &[&str] = &["train", "dev", "out_dir", "init_checkpoint"];

/// Keys accepted in a config file.
pub const KEYS: &[&str] = &[
    "profile",
    "strategy",
    "alpha",
    "beta",
    "kappa",
    "scoring_fn",
    "prune_keep_buckets",
    "learning_rate",
    "finetune_learning_rate",
    "batch_size",
    "max_epochs",
    "eval_every_steps",
    "seed",
    "warmup_strategy",
    "patience",
    "eval_beam",
    "lang",
    "allow_cold_start",
    "warm_started",
    "max_grad_norm",
    "low_reward_threshold",
    "min_count",
    "embed_dim",
    "hidden_dim",
    "pos_dim",
    "max_input_len",
    "max_output_len",
    "zero_output_init",
    "model_seed",
    "train",
    "dev",
    "out_dir",
    "init_checkpoint",
];
