//! Variance schedule for the forward corruption chain.
//!
//! Stores the per-step variances `beta_t`, the derived `alpha_t = 1 - beta_t`
//! and their running product `alphabar_t` for `t = 1..=T`, with the boundary
//! convention `alphabar_0 = 1`.

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
/// Chosen so that `alphabar_T` is near zero (~2e-3 at T=200): sampling
/// starts from pure noise, so the forward chain must end there too or the
/// denoiser sees inputs at T it was never trained on.
pub const DEFAULT_BETA_END: f64 = 0.06;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alphabar: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "t={t} out of range 1..={}", self.steps());
        self.beta[t - 1]
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.steps()).contains(&t), "t={t} out of range 1..={}", self.steps());
        self.alpha[t - 1]
    }

    /// `alphabar_t` for `t` in `0..=T`; `alphabar_0 = 1`.
    pub fn alphabar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "t={t} out of range 0..={}", self.steps());
        if t == 0 {
            1.0
        } else {
            self.alphabar[t - 1]
        }
    }

    pub fn beta_bounds(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }
}

/// Builds a linear variance ramp from `beta_start` to `beta_end` inclusive.
pub fn build_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidArg("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::InvalidArg(format!(
            "beta bounds must lie in (0, 1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::InvalidArg(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }

    let beta: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alphabar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alphabar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alphabar, beta_start, beta_end })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn two_step_product() {
        // direct product oracle: 0.9 * 0.8
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert_relative_eq!(s.alphabar(1), 0.9, max_relative = 1e-12);
        assert_relative_eq!(s.alphabar(2), 0.72, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_ramp_is_constant() {
        let s = build_schedule(5, 0.07, 0.07).unwrap();
        for t in 1..=5 {
            assert_eq!(s.beta(t), 0.07);
        }
    }

    #[test]
    fn alphabar_zero_boundary() {
        let s = build_schedule(3, 0.1, 0.3).unwrap();
        assert_eq!(s.alphabar(0), 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(4, 0.0, 0.2).is_err());
        assert!(build_schedule(4, 0.1, 1.0).is_err());
        assert!(build_schedule(4, 0.3, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(t_steps in 1usize..300, b0 in 1e-5f64..0.5, spread in 0.0f64..0.4) {
            let b1 = (b0 + spread).min(0.999);
            let s = build_schedule(t_steps, b0, b1).unwrap();
            prop_assert!(s.alphabar(t_steps) < s.alphabar(0));
            for t in 1..=t_steps {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                // product identity with the t=0 boundary
                prop_assert!((s.alphabar(t) - s.alphabar(t - 1) * s.alpha(t)).abs() < 1e-15);
                prop_assert!(s.alphabar(t) < s.alphabar(t - 1));
                prop_assert!(s.alphabar(t) > 0.0 && s.alphabar(t) <= 1.0);
            }
        }
    }
}
