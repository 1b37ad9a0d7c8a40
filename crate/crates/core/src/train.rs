//! The denoiser training loop.
//!
//! Per step: draw clips, encode, draw a timestep uniformly from `[1, T]`,
//! corrupt with fresh noise, draw a Bernoulli frame mask, assemble the
//! conditional input, take one optimizer step on the batch-mean noise-MSE.
//! All randomness flows through one seeded generator owned by the loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{encode, Codec};
use crate::data::tokenize;
use crate::diffusion::{forward_corrupt, sample_noise_grid};
use crate::error::{Error, Result};
use crate::grid::VideoClip;
use crate::mask::{apply_mask, assemble_input, sample_mask};
use crate::nn::{
    loss_and_gradients, ArchConfig, BatchItem, DenoiserParams, LossSupport, Optimizer,
    OptimizerKind,
};
use crate::schedule::NoiseSchedule;

/// Window used for the smoothed loss that drives early stopping.
pub const SMOOTH_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Bernoulli visibility rate p of the random frame mask.
    pub mask_rate: f64,
    pub loss_support: LossSupport,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    /// Stop once the smoothed loss drops below this value.
    pub target_loss: Option<f32>,
    /// Redraw masks that come out all-zero (off by default; an all-zero mask
    /// is valid unconditional training).
    pub resample_empty_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 4,
            total_steps: 4000,
            mask_rate: 0.15,
            loss_support: LossSupport::AllFrames,
            seed: 0,
            checkpoint_every: 1000,
            optimizer: OptimizerKind::Adam,
            target_loss: None,
            resample_empty_mask: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidArg(format!("mask rate {} outside [0, 1]", self.mask_rate)));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArg("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: DenoiserParams<f32>,
    /// `(step, loss)` per optimizer step, 1-based steps.
    pub history: Vec<(usize, f32)>,
    /// Step at which the target loss was reached, if it was.
    pub reached_target_at: Option<usize>,
}

/// Mean of the most recent `window` losses.
pub fn smoothed_loss(history: &[(usize, f32)], window: usize) -> Option<f32> {
    if history.is_empty() {
        return None;
    }
    let tail = &history[history.len().saturating_sub(window)..];
    Some(tail.iter().map(|(_, l)| l).sum::<f32>() / tail.len() as f32)
}

/// Loss history as line-oriented text, one `step loss` pair per line.
pub fn history_lines(history: &[(usize, f32)]) -> String {
    let mut out = String::new();
    for (step, loss) in history {
        out.push_str(&format!("{step} {loss:.6}\n"));
    }
    out
}

/// Trains a denoiser from scratch on the dataset.
///
/// `on_checkpoint` runs at the configured cadence (and once at the end) so
/// the caller can persist parameters; a divergence abort leaves the last
/// written checkpoint in place and reports the offending step.
pub fn train(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    dataset: &[VideoClip],
    codec: &Codec,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f32),
    mut on_checkpoint: impl FnMut(usize, &DenoiserParams<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg("training dataset is empty".into()));
    }
    if codec.latent_channels() != arch.latent_channels {
        return Err(Error::InvalidArg(format!(
            "codec latent channels {} vs architecture {}",
            codec.latent_channels(),
            arch.latent_channels
        )));
    }

    // dataset is fixed; encode and tokenize once
    let latents: Vec<_> = dataset.iter().map(|c| encode(codec, c)).collect::<Result<_>>()?;
    let token_lists: Vec<Vec<usize>> =
        dataset.iter().map(|c| tokenize(&c.caption)).collect::<Result<_>>()?;
    let t_max = sched.steps();

    let mut params = DenoiserParams::<f32>::init(arch, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_steps);
    let mut reached_target_at = None;

    for step in 1..=cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..latents.len());
            let z0 = &latents[idx];
            let (n, c, h, w) = z0.shape();
            let t = rng.random_range(1..=t_max);
            let eps = sample_noise_grid(n, c, h, w, &mut rng);
            let z_t = forward_corrupt(z0, t, &eps, sched)?;
            let mut mask = sample_mask(n, cfg.mask_rate, &mut rng)?;
            if cfg.resample_empty_mask {
                while mask.popcount() == 0 {
                    mask = sample_mask(n, cfg.mask_rate, &mut rng)?;
                }
            }
            let z0_masked = apply_mask(z0, &mask)?;
            let input = assemble_input(&z_t, &mask, &z0_masked)?;
            batch.push(BatchItem {
                input,
                t,
                tokens: token_lists[idx].clone(),
                eps_true: eps,
                mask,
            });
        }

        let (loss, grads) = match loss_and_gradients(&params, &batch, cfg.loss_support) {
            Ok(ok) => ok,
            Err(Error::Numerical(msg)) => {
                return Err(Error::Diverged { step, loss: parse_loss(&msg) });
            }
            Err(e) => return Err(e),
        };
        opt.update(&mut params, &grads);
        history.push((step, loss));
        on_step(step, loss);

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            on_checkpoint(step, &params)?;
        }
        if let Some(target) = cfg.target_loss {
            if history.len() >= SMOOTH_WINDOW
                && smoothed_loss(&history, SMOOTH_WINDOW).unwrap() < target
            {
                reached_target_at = Some(step);
                break;
            }
        }
    }
    if cfg.total_steps > 0 {
        on_checkpoint(history.last().map(|(s, _)| *s).unwrap_or(0), &params)?;
    }
    Ok(TrainOutput { params, history, reached_target_at })
}

fn parse_loss(msg: &str) -> f64 {
    msg.split_whitespace()
        .last()
        .and_then(|s| s.parse().ok())
        .unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;
    use crate::schedule::build_schedule;

    fn tiny_setup() -> (ArchConfig, Vec<VideoClip>, Codec, NoiseSchedule) {
        let mut arch = ArchConfig::tiny();
        arch.latent_channels = 3; // identity codec
        let data = make_dataset(2, 1, 2, 8, 8).unwrap();
        let sched = build_schedule(50, 1e-3, 0.03).unwrap();
        (arch, data, Codec::Identity, sched)
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (arch, data, codec, sched) = tiny_setup();
        let cfg = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        let out = train(&cfg, &arch, &data, &codec, &sched, |_, _| {}, |_, _| Ok(())).unwrap();
        assert_eq!(out.params, DenoiserParams::<f32>::init(&arch, cfg.seed).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn fixed_seed_reproduces_loss_history() {
        let (arch, data, codec, sched) = tiny_setup();
        let cfg = TrainConfig { total_steps: 6, batch_size: 2, seed: 9, ..TrainConfig::default() };
        let run = || {
            train(&cfg, &arch, &data, &codec, &sched, |_, _| {}, |_, _| Ok(()))
                .unwrap()
                .history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_tiny_overfit() {
        let (arch, data, codec, sched) = tiny_setup();
        let cfg = TrainConfig {
            total_steps: 120,
            batch_size: 2,
            lr: 2e-3,
            seed: 4,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &arch, &data, &codec, &sched, |_, _| {}, |_, _| Ok(())).unwrap();
        let early: f32 = out.history[..20].iter().map(|(_, l)| l).sum::<f32>() / 20.0;
        let late: f32 =
            out.history[out.history.len() - 20..].iter().map(|(_, l)| l).sum::<f32>() / 20.0;
        assert!(late < early * 0.7, "early {early} late {late}");
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let (arch, data, codec, sched) = tiny_setup();
        let cfg = TrainConfig {
            total_steps: 400,
            batch_size: 1,
            lr: 1e9,
            optimizer: OptimizerKind::Sgd,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let mut checkpoints = Vec::new();
        let err = train(
            &cfg,
            &arch,
            &data,
            &codec,
            &sched,
            |_, _| {},
            |step, _| {
                checkpoints.push(step);
                Ok(())
            },
        )
        .unwrap_err();
        match err {
            Error::Diverged { step, .. } => {
                // the last good checkpoint must predate the divergence
                assert!(checkpoints.iter().all(|s| *s < step));
                assert!(!checkpoints.is_empty(), "no checkpoint retained before divergence");
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn early_stop_on_target_loss() {
        let (arch, data, codec, sched) = tiny_setup();
        let cfg = TrainConfig {
            total_steps: 5000,
            batch_size: 2,
            lr: 2e-3,
            seed: 4,
            checkpoint_every: 0,
            target_loss: Some(10.0), // trivially reached at the window boundary
            ..TrainConfig::default()
        };
        let out = train(&cfg, &arch, &data, &codec, &sched, |_, _| {}, |_, _| Ok(())).unwrap();
        assert_eq!(out.reached_target_at, Some(SMOOTH_WINDOW));
        assert_eq!(out.history.len(), SMOOTH_WINDOW);
    }
}
