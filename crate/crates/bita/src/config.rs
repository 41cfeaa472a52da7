//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored and later lines win. A key may
//! carry a stage prefix (`s1.`, `s2.`, `ft.`) to apply only to that stage.
//! `seed` sets the trainable-parameter, shuffling and augmentation seeds at
//! once; the `BITA_SEED` environment variable overrides it after the file is
//! read.
//!
//! Schedule keys (`warmup_steps`, `lr_start`, `lr_peak`, `lr_min`) override
//! the stage constants; the schedule length always follows the run length.

use std::fs;
use std::path::Path;

use bita_core::model::ModelConfig;
use bita_core::objectives::SimilarityPooling;
use bita_core::train::{ScheduleConfig, Stage, TrainConfig};
use bita_core::MixerKind;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, BitaError, Result};

pub const SEED_ENV: &str = "BITA_SEED";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ScheduleOverrides {
    pub warmup_steps: Option<usize>,
    pub lr_start: Option<f64>,
    pub lr_peak: Option<f64>,
    pub lr_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleOverrides,
    /// Print every n-th step record to stderr.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleOverrides::default(),
            log_every: 1,
        }
    }
}

pub fn parse_mixer(v: &str) -> std::result::Result<MixerKind, String> {
    match v {
        "fourier" => Ok(MixerKind::FourierMix),
        "self-attn" => Ok(MixerKind::SelfAttention),
        _ => Err(format!("mixer must be fourier or self-attn, got {v:?}")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn optional<T: std::str::FromStr>(v: &str) -> std::result::Result<Option<T>, String> {
    if v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.data_seed = seed;
        self.train.augment_seed = seed;
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "hidden_dim" => m.hidden_dim = num(v)?,
            "num_layers" => m.num_layers = num(v)?,
            "num_heads" => m.num_heads = num(v)?,
            "num_prompts" => m.num_prompts = num(v)?,
            "image_size" => m.image_size = num(v)?,
            "image_patches" => m.image_patches = num(v)?,
            "image_feat_dim" => m.image_feat_dim = num(v)?,
            "image_layers" => m.image_layers = num(v)?,
            "image_heads" => m.image_heads = num(v)?,
            "lm_dim" => m.lm_dim = num(v)?,
            "lm_layers" => m.lm_layers = num(v)?,
            "lm_heads" => m.lm_heads = num(v)?,
            "lm_ffn_dim" => m.lm_ffn_dim = num(v)?,
            "lm_max_positions" => m.lm_max_positions = num(v)?,
            "vocab_size" => m.vocab_size = num(v)?,
            "max_text_len" => m.max_text_len = num(v)?,
            "mixer" => m.mixer = parse_mixer(v)?,
            "frozen_seed" => m.frozen_seed = num(v)?,
            "layer_norm_eps" => m.layer_norm_eps = num(v)?,
            "seed" => self.set_seed(num(v)?),
            "data_seed" => t.data_seed = num(v)?,
            "augment_seed" => t.augment_seed = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "max_steps" => t.max_steps = optional(v)?,
            "beta1" => t.optimizer.beta1 = num(v)?,
            "beta2" => t.optimizer.beta2 = num(v)?,
            "eps" => t.optimizer.eps = num(v)?,
            "weight_decay" => t.optimizer.weight_decay = num(v)?,
            "temperature" => t.itc.temperature = num(v)?,
            "pooling" => {
                t.itc.pooling = match v {
                    "max" => SimilarityPooling::MaxOverPrompts,
                    "mean" => SimilarityPooling::MeanOverPrompts,
                    _ => return Err(format!("pooling must be max or mean, got {v:?}")),
                }
            }
            "augment" => t.augment = flag(v)?,
            "grad_clip" => t.grad_clip = optional(v)?,
            "warmup_steps" => self.schedule.warmup_steps = Some(num(v)?),
            "lr_start" => self.schedule.lr_start = Some(num(v)?),
            "lr_peak" => self.schedule.lr_peak = Some(num(v)?),
            "lr_min" => self.schedule.lr_min = Some(num(v)?),
            "log_every" => self.log_every = num::<usize>(v)?.max(1),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses config text for `stage`; keys prefixed for other stages are
    /// checked but not applied.
    pub fn parse(text: &str, stage: Option<Stage>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut scratch = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| BitaError::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let (target, key) = match key.split_once('.') {
                Some((tag, rest)) => {
                    let s = Stage::from_tag(tag).ok_or_else(|| err(format!("unknown stage prefix {tag:?}")))?;
                    (if Some(s) == stage { &mut cfg } else { &mut scratch }, rest)
                }
                None => (&mut cfg, key),
            };
            target.apply(key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    /// Reads a config file and applies the `BITA_SEED` override.
    pub fn load(path: Option<&Path>, stage: Option<Stage>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&fs::read_to_string(p).map_err(io_err(p))?, stage)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| BitaError::Config {
                line: 0,
                msg: format!("{SEED_ENV}={v:?} is not an unsigned integer"),
            })?;
            cfg.set_seed(seed);
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Training settings for `stage` over `n_pairs` pairs with the schedule
    /// fixed to the run length.
    pub fn train_config(&self, stage: Stage, n_pairs: usize) -> TrainConfig {
        let mut t = self.train.clone();
        let total = t.total_steps(n_pairs);
        let mut s: ScheduleConfig = t.schedule_for(stage, total);
        let o = self.schedule;
        s.warmup_steps = o.warmup_steps.unwrap_or(s.warmup_steps);
        s.lr_start = o.lr_start.unwrap_or(s.lr_start);
        s.lr_peak = o.lr_peak.unwrap_or(s.lr_peak);
        s.lr_min = o.lr_min.unwrap_or(s.lr_min);
        t.schedule = Some(s);
        t
    }

    /// First 16 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configs always serialize");
        let digest = Sha256::digest(json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
