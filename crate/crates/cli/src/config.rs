//! Flat `key = value` run configuration with `--key value` overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must appear
//! in [`SCHEMA`]; unknown keys, unparsable values and inconsistent
//! combinations are rejected.

use std::path::{Path, PathBuf};

use omni_moe::data::synth::SynthSpec;
use omni_moe::encoder::{ModelConfig, Variant};
use omni_moe::train::{AugmentConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("`{key}`: {reason}")]
    Inconsistent { key: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// `(key, description)` of every accepted setting.
pub const SCHEMA: &[(&str, &str)] = &[
    ("variants", "comma-separated list of dense, switch, omni"),
    ("layers", "encoder blocks"),
    ("embed_dim", "model width D"),
    ("ffn_dim", "feed-forward width F"),
    ("heads", "attention heads"),
    ("experts", "experts per MoE layer (dense uses 1)"),
    ("frame_stack", "input frames stacked per encoder step"),
    ("peak_lr", "peak learning rate"),
    ("warmup_steps", "linear warmup steps"),
    (
        "cosine_steps",
        "cosine decay steps, also the step-decay interval",
    ),
    ("step_decay_factor", "decay factor in (0, 1]"),
    ("clip_norm", "global gradient-norm clip"),
    ("aux_weight", "load-balancing loss weight"),
    ("weight_decay", "decoupled weight decay"),
    ("adam_beta1", "AdamW beta1"),
    ("adam_beta2", "AdamW beta2"),
    ("adam_eps", "AdamW epsilon"),
    ("max_steps", "optimizer steps"),
    ("batch_max_frames", "raw frames per batch"),
    ("seed", "global seed for every random stream"),
    ("freq_masks", "frequency masks per utterance"),
    ("freq_width", "maximum frequency-mask width"),
    ("time_masks", "time masks per utterance"),
    ("time_width", "maximum time-mask width"),
    (
        "time_ratio",
        "time-mask width cap as a fraction of the length",
    ),
    (
        "checkpoint_every",
        "steps between intermediate checkpoints (0: final only)",
    ),
    ("log_every", "steps between progress lines on stderr"),
    (
        "synth",
        "generate a synthetic corpus instead of reading one",
    ),
    ("synth_utterances", "synthetic corpus size"),
    (
        "synth_heldout",
        "synthetic utterances held out for evaluation",
    ),
    (
        "synth_alphabet",
        "synthetic alphabet size including the separator",
    ),
    ("synth_seed", "synthetic corpus seed"),
    ("synth_channel_noise", "per-frame noise standard deviation"),
    (
        "synth_template_noise",
        "per-utterance template perturbation",
    ),
    ("train_data", "directory holding manifest.tsv for training"),
    (
        "heldout_data",
        "directory holding manifest.tsv for evaluation",
    ),
    ("output_dir", "where every artifact is written"),
];

pub const OUTPUT_ENV: &str = "OMNI_MOE_OUTPUT";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    /// Whether `experts` was set explicitly.
    pub experts_set: bool,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub synth: bool,
    pub synth_utterances: usize,
    pub synth_heldout: usize,
    pub synth_spec: SynthSpec,
    pub train_data: Option<PathBuf>,
    pub heldout_data: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SynthSpec::default();
        RunConfig {
            variants: vec![Variant::Omni],
            model: ModelConfig::desk(Variant::Omni, 2, spec.alphabet_size + 1),
            experts_set: false,
            train: TrainConfig::desk(),
            checkpoint_every: 0,
            log_every: 100,
            synth: false,
            synth_utterances: 2000,
            synth_heldout: 200,
            synth_spec: spec,
            train_data: None,
            heldout_data: None,
            output_dir: std::env::var_os(OUTPUT_ENV)
                .map_or_else(|| PathBuf::from("runs"), PathBuf::from),
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e))
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn is_bool_key(key: &str) -> bool {
    key == "synth"
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let a: &mut AugmentConfig = &mut t.augment;
        let s = &mut self.synth_spec;
        match key {
            "variants" | "variant" => {
                self.variants = value
                    .split(',')
                    .map(|v| v.trim().parse::<Variant>().map_err(|e| bad(key, value, e)))
                    .collect::<Result<_, _>>()?;
                if self.variants.is_empty() {
                    return Err(bad(key, value, "no variant given"));
                }
            }
            "layers" => m.layers = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "ffn_dim" => m.ffn_dim = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "experts" => {
                m.experts = num(key, value)?;
                self.experts_set = true;
            }
            "frame_stack" => {
                m.frame_stack = num(key, value)?;
                s.frame_stack = m.frame_stack;
            }
            "peak_lr" => t.peak_lr = num(key, value)?,
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "cosine_steps" => t.cosine_steps = num(key, value)?,
            "step_decay_factor" => t.step_decay_factor = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "aux_weight" => t.aux_weight = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "max_steps" => t.max_steps = num(key, value)?,
            "batch_max_frames" => t.batch_max_frames = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "freq_masks" => a.freq_masks = num(key, value)?,
            "freq_width" => a.freq_width = num(key, value)?,
            "time_masks" => a.time_masks = num(key, value)?,
            "time_width" => a.time_width = num(key, value)?,
            "time_ratio" => a.time_ratio = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "synth" => self.synth = boolean(key, value)?,
            "synth_utterances" => self.synth_utterances = num(key, value)?,
            "synth_heldout" => self.synth_heldout = num(key, value)?,
            "synth_alphabet" => s.alphabet_size = num(key, value)?,
            "synth_seed" => s.seed = num(key, value)?,
            "synth_channel_noise" => s.channel_noise_sigma = num(key, value)?,
            "synth_template_noise" => s.template_noise_sigma = num(key, value)?,
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "heldout_data" => self.heldout_data = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.display().to_string(),
                line: i + 1,
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `--config FILE` first, then every `--key value` (or bare
    /// `--synth`) in order.
    pub fn from_args(args: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let raw = &args[i];
            let key = raw
                .strip_prefix("--")
                .ok_or_else(|| ConfigError::UnknownKey(raw.clone()))?;
            if let Some((k, v)) = key.split_once('=') {
                pairs.push((k.replace('-', "_"), v.to_string()));
                i += 1;
                continue;
            }
            let key = key.replace('-', "_");
            let next = args.get(i + 1).filter(|n| !n.starts_with("--"));
            match next {
                Some(v) if !is_bool_key(&key) || matches!(v.as_str(), "true" | "false") => {
                    pairs.push((key, v.clone()));
                    i += 2;
                }
                _ if is_bool_key(&key) => {
                    pairs.push((key, "true".into()));
                    i += 1;
                }
                _ => {
                    return Err(bad(&key, "", "missing value"));
                }
            }
        }
        for (_, v) in pairs.iter().filter(|(k, _)| k == "config") {
            cfg.load_file(Path::new(v))?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "config") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model configuration of one variant with the given vocabulary.
    pub fn model_for(&self, variant: Variant, vocab_size: usize, feat_dim: usize) -> ModelConfig {
        let mut m = self.model;
        m.variant = variant;
        m.vocab_size = vocab_size;
        m.feat_dim = feat_dim;
        if variant == Variant::Dense {
            m.experts = 1;
        }
        m
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.variants == [Variant::Dense] && self.experts_set && self.model.experts != 1 {
            return Err(ConfigError::Inconsistent {
                key: "experts".into(),
                reason: format!(
                    "dense models have exactly 1 expert, got {}",
                    self.model.experts
                ),
            });
        }
        for &v in &self.variants {
            let m = self.model_for(v, self.model.vocab_size, self.model.feat_dim);
            m.validate().map_err(|e| inconsistent(&e))?;
        }
        self.train.validate().map_err(|e| inconsistent(&e))?;
        if self.synth {
            self.synth_spec.validate().map_err(|e| inconsistent(&e))?;
            if self.synth_heldout == 0 || self.synth_heldout >= self.synth_utterances {
                return Err(ConfigError::Inconsistent {
                    key: "synth_heldout".into(),
                    reason: "must be positive and smaller than synth_utterances".into(),
                });
            }
        } else if self.train_data.is_none() {
            return Err(ConfigError::Inconsistent {
                key: "train_data".into(),
                reason: "give a corpus directory or request --synth".into(),
            });
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of every schema key.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let a = &t.augment;
        let s = &self.synth_spec;
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        let variants: Vec<&str> = self.variants.iter().map(|v| v.as_str()).collect();
        let values: Vec<(&str, String)> = vec![
            ("variants", variants.join(",")),
            ("layers", m.layers.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("heads", m.heads.to_string()),
            ("experts", m.experts.to_string()),
            ("frame_stack", m.frame_stack.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("cosine_steps", t.cosine_steps.to_string()),
            ("step_decay_factor", t.step_decay_factor.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("aux_weight", t.aux_weight.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("batch_max_frames", t.batch_max_frames.to_string()),
            ("seed", t.seed.to_string()),
            ("freq_masks", a.freq_masks.to_string()),
            ("freq_width", a.freq_width.to_string()),
            ("time_masks", a.time_masks.to_string()),
            ("time_width", a.time_width.to_string()),
            ("time_ratio", a.time_ratio.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("synth", self.synth.to_string()),
            ("synth_utterances", self.synth_utterances.to_string()),
            ("synth_heldout", self.synth_heldout.to_string()),
            ("synth_alphabet", s.alphabet_size.to_string()),
            ("synth_seed", s.seed.to_string()),
            ("synth_channel_noise", s.channel_noise_sigma.to_string()),
            ("synth_template_noise", s.template_noise_sigma.to_string()),
            ("train_data", opt(&self.train_data)),
            ("heldout_data", opt(&self.heldout_data)),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        debug_assert_eq!(values.len(), SCHEMA.len());
        values
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn inconsistent(e: &omni_moe::Error) -> ConfigError {
    match e {
        omni_moe::Error::Config { field, reason } => ConfigError::Inconsistent {
            key: field.to_string(),
            reason: reason.clone(),
        },
        other => ConfigError::Inconsistent {
            key: "config".into(),
            reason: other.to_string(),
        },
    }
}
