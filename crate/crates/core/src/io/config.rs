//! Line-oriented `key = value` configuration.
//!
//! Every key has a default; unknown and duplicate keys are errors. The
//! serialized form is canonical (fixed key order), so a resolved config
//! embeds reproducibly in checkpoints and run manifests.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ArchConfig, LossSupport, OptimizerKind};
use crate::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::tasks::SamplerSettings;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // architecture
    pub width1: usize,
    pub width2: usize,
    pub time_embed_dim: usize,
    pub sin_dim: usize,
    pub text_embed_dim: usize,
    pub norm_groups: usize,
    // schedule
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // training
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub mask_rate: f64,
    pub loss_support: LossSupport,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    pub target_loss: Option<f64>,
    pub resample_empty_mask: bool,
    pub train_step: usize,
    // data
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dataset_count: usize,
    pub dataset_seed: u64,
    // codec
    pub codec: CodecKind,
    pub codec_latent_channels: usize,
    pub codec_hidden: usize,
    pub codec_steps: usize,
    pub codec_lr: f64,
    // sampling
    pub sampler_steps: usize,
    pub eta: f64,
    pub overlap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    Learned,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            width1: 32,
            width2: 64,
            time_embed_dim: 128,
            sin_dim: 64,
            text_embed_dim: 64,
            norm_groups: 8,
            schedule_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            lr: 2e-4,
            batch_size: 2,
            total_steps: 4000,
            mask_rate: 0.15,
            loss_support: LossSupport::AllFrames,
            seed: 0,
            checkpoint_every: 1000,
            optimizer: OptimizerKind::Adam,
            target_loss: None,
            resample_empty_mask: false,
            train_step: 0,
            frames: 16,
            height: 16,
            width: 16,
            dataset_count: 8,
            dataset_seed: 153,
            codec: CodecKind::Identity,
            codec_latent_channels: 4,
            codec_hidden: 16,
            codec_steps: 400,
            codec_lr: 3e-3,
            sampler_steps: 50,
            eta: 0.0,
            overlap: 2,
        }
    }
}

impl Config {
    /// Latent channels seen by the denoiser, derived from the codec choice.
    pub fn latent_channels(&self) -> usize {
        match self.codec {
            CodecKind::Identity => 3,
            CodecKind::Learned => self.codec_latent_channels,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            latent_channels: self.latent_channels(),
            width1: self.width1,
            width2: self.width2,
            time_embed_dim: self.time_embed_dim,
            sin_dim: self.sin_dim,
            text_embed_dim: self.text_embed_dim,
            norm_groups: self.norm_groups,
            vocab_size: crate::data::vocab_size(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            mask_rate: self.mask_rate,
            loss_support: self.loss_support,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            optimizer: self.optimizer,
            target_loss: self.target_loss.map(|v| v as f32),
            resample_empty_mask: self.resample_empty_mask,
        }
    }

    pub fn sampler(&self) -> SamplerSettings {
        SamplerSettings { steps: self.sampler_steps, eta: self.eta }
    }

    /// Canonical serialized form, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("width1", self.width1.to_string());
        kv("width2", self.width2.to_string());
        kv("time_embed_dim", self.time_embed_dim.to_string());
        kv("sin_dim", self.sin_dim.to_string());
        kv("text_embed_dim", self.text_embed_dim.to_string());
        kv("norm_groups", self.norm_groups.to_string());
        kv("schedule_steps", self.schedule_steps.to_string());
        kv("beta_start", format!("{}", self.beta_start));
        kv("beta_end", format!("{}", self.beta_end));
        kv("lr", format!("{}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("mask_rate", format!("{}", self.mask_rate));
        kv(
            "loss_support",
            match self.loss_support {
                LossSupport::AllFrames => "all".into(),
                LossSupport::MaskedOnly => "masked".into(),
            },
        );
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
        );
        kv("target_loss", self.target_loss.map_or("none".into(), |v| format!("{v}")));
        kv("resample_empty_mask", self.resample_empty_mask.to_string());
        kv("train_step", self.train_step.to_string());
        kv("frames", self.frames.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("dataset_count", self.dataset_count.to_string());
        kv("dataset_seed", self.dataset_seed.to_string());
        kv(
            "codec",
            match self.codec {
                CodecKind::Identity => "identity".into(),
                CodecKind::Learned => "learned".into(),
            },
        );
        kv("codec_latent_channels", self.codec_latent_channels.to_string());
        kv("codec_hidden", self.codec_hidden.to_string());
        kv("codec_steps", self.codec_steps.to_string());
        kv("codec_lr", format!("{}", self.codec_lr));
        kv("sampler_steps", self.sampler_steps.to_string());
        kv("eta", format!("{}", self.eta));
        kv("overlap", self.overlap.to_string());
        s
    }

    /// Parses config text. Every key must be known and appear at most once;
    /// missing keys take their defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse(format!("duplicate key '{key}'")));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("key '{key}': cannot parse '{v}'")))
        }
        match key {
            "width1" => self.width1 = num(key, value)?,
            "width2" => self.width2 = num(key, value)?,
            "time_embed_dim" => self.time_embed_dim = num(key, value)?,
            "sin_dim" => self.sin_dim = num(key, value)?,
            "text_embed_dim" => self.text_embed_dim = num(key, value)?,
            "norm_groups" => self.norm_groups = num(key, value)?,
            "schedule_steps" => self.schedule_steps = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "mask_rate" => self.mask_rate = num(key, value)?,
            "loss_support" => {
                self.loss_support = match value {
                    "all" => LossSupport::AllFrames,
                    "masked" => LossSupport::MaskedOnly,
                    other => return Err(Error::Parse(format!("loss_support: '{other}'"))),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(Error::Parse(format!("optimizer: '{other}'"))),
                }
            }
            "target_loss" => {
                self.target_loss = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "resample_empty_mask" => self.resample_empty_mask = num(key, value)?,
            "train_step" => self.train_step = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "dataset_count" => self.dataset_count = num(key, value)?,
            "dataset_seed" => self.dataset_seed = num(key, value)?,
            "codec" => {
                self.codec = match value {
                    "identity" => CodecKind::Identity,
                    "learned" => CodecKind::Learned,
                    other => return Err(Error::Parse(format!("codec: '{other}'"))),
                }
            }
            "codec_latent_channels" => self.codec_latent_channels = num(key, value)?,
            "codec_hidden" => self.codec_hidden = num(key, value)?,
            "codec_steps" => self.codec_steps = num(key, value)?,
            "codec_lr" => self.codec_lr = num(key, value)?,
            "sampler_steps" => self.sampler_steps = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "overlap" => self.overlap = num(key, value)?,
            unknown => return Err(Error::Parse(format!("unknown key '{unknown}'"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        let parsed = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = Config::parse("total_steps = 10\n# comment\n\nseed = 42\n").unwrap();
        assert_eq!(cfg.total_steps, 10);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.width1, Config::default().width1);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(Config::parse("warmup_steps = 3\n").is_err());
    }

    #[test]
    fn duplicate_key_is_an_error() {
        assert!(Config::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("lr = not_a_number\n").is_err());
    }

    #[test]
    fn learned_codec_changes_latent_channels() {
        let cfg = Config::parse("codec = learned\ncodec_latent_channels = 4\n").unwrap();
        assert_eq!(cfg.latent_channels(), 4);
        assert_eq!(Config::default().latent_channels(), 3);
    }
}
