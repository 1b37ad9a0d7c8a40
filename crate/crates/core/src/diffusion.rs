//! Forward corruption, the noise-prediction training loss, and reverse
//! sampling steps over latent grids.
//!
//! The forward chain admits the closed form
//! `z_t = sqrt(alphabar_t) * z_0 + sqrt(1 - alphabar_t) * eps` which is what
//! [`forward_corrupt`] computes. Reverse updates come in two flavours: the
//! non-Markovian update of [`ddim_step`] (deterministic at `eta = 0`, and
//! invertible, see [`ddim_invert_step`]) and the ancestral update of
//! [`ddpm_step`].

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::schedule::NoiseSchedule;

/// Noise prediction produced by the denoiser; shaped like the grid it was
/// predicted for.
pub type NoisePrediction = LatentGrid;

/// Draws an i.i.d. standard-normal grid from the caller's generator.
pub fn sample_noise_grid<R: Rng>(n: usize, c: usize, h: usize, w: usize, rng: &mut R) -> LatentGrid {
    let mut values = Array4::zeros((n, c, h, w));
    for v in values.iter_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *v = x as f32;
    }
    LatentGrid { values }
}

/// `z_t = sqrt(alphabar_t) z_0 + sqrt(1 - alphabar_t) eps`, with `t = 0`
/// returning `z_0` exactly.
pub fn forward_corrupt(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if !z0.same_shape(eps) {
        return Err(Error::ShapeMismatch(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t > sched.steps() {
        return Err(Error::InvalidArg(format!("t={t} exceeds schedule length {}", sched.steps())));
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let abar = sched.alphabar(t);
    let ca = abar.sqrt() as f32;
    let cb = (1.0 - abar).sqrt() as f32;
    Ok(LatentGrid { values: &z0.values * ca + &eps.values * cb })
}

/// Mean squared error over all elements of the grid, masked and visible
/// frames alike.
pub fn training_loss(eps_true: &LatentGrid, eps_pred: &NoisePrediction) -> Result<f32> {
    if !eps_true.same_shape(eps_pred) {
        return Err(Error::ShapeMismatch(format!(
            "eps_true {:?} vs eps_pred {:?}",
            eps_true.shape(),
            eps_pred.shape()
        )));
    }
    let n = eps_true.values.len() as f64;
    let sum: f64 = eps_true
        .values
        .iter()
        .zip(eps_pred.values.iter())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum();
    Ok((sum / n) as f32)
}

/// One reverse update from step `t` to `t_prev < t`.
///
/// Recovers `z0_hat = (z_t - sqrt(1 - alphabar_t) eps_hat) / sqrt(alphabar_t)`
/// and re-projects it to `t_prev`. With `eta = 0` the update is a
/// deterministic function of its inputs and `noise` must be `None`; with
/// `eta > 0` the caller supplies the noise grid explicitly.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_pred: &NoisePrediction,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    if t_prev >= t {
        return Err(Error::InvalidArg(format!("t_prev={t_prev} must be < t={t}")));
    }
    if t > sched.steps() {
        return Err(Error::InvalidArg(format!("t={t} exceeds schedule length {}", sched.steps())));
    }
    if !z_t.same_shape(eps_pred) {
        return Err(Error::ShapeMismatch(format!(
            "z_t {:?} vs eps_pred {:?}",
            z_t.shape(),
            eps_pred.shape()
        )));
    }
    if eta < 0.0 {
        return Err(Error::InvalidArg(format!("eta must be >= 0, got {eta}")));
    }

    let abar_t = sched.alphabar(t);
    let abar_prev = sched.alphabar(t_prev);

    let sigma = if eta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev)).sqrt()
    };

    let z0_coef = (abar_prev / abar_t).sqrt();
    let dir_sq = 1.0 - abar_prev - sigma * sigma;
    if dir_sq < -1e-12 {
        return Err(Error::InvalidArg(format!("eta={eta} too large for step {t}->{t_prev}")));
    }
    // z0_hat expansion folded into two coefficients on (z_t, eps_hat).
    let eps_coef = dir_sq.max(0.0).sqrt() - z0_coef * (1.0 - abar_t).sqrt();

    let mut values = &z_t.values * (z0_coef as f32) + &eps_pred.values * (eps_coef as f32);
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::InvalidArg("eta > 0 requires an explicitly supplied noise grid".into())
        })?;
        if !z_t.same_shape(noise) {
            return Err(Error::ShapeMismatch("noise shape differs from z_t".into()));
        }
        values = values + &noise.values * (sigma as f32);
    }
    Ok(LatentGrid { values })
}

/// One inversion update from step `t` to `t_next > t`, the reverse walk of
/// the deterministic `eta = 0` chain. `t = 0` is allowed as the clean start.
pub fn ddim_invert_step(
    z_t: &LatentGrid,
    eps_pred: &NoisePrediction,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t_next <= t {
        return Err(Error::InvalidArg(format!("t_next={t_next} must be > t={t}")));
    }
    if t_next > sched.steps() {
        return Err(Error::InvalidArg(format!(
            "t_next={t_next} exceeds schedule length {}",
            sched.steps()
        )));
    }
    if !z_t.same_shape(eps_pred) {
        return Err(Error::ShapeMismatch("z_t and eps_pred shapes differ".into()));
    }
    let abar_t = sched.alphabar(t);
    let abar_next = sched.alphabar(t_next);
    let z0_coef = (abar_next / abar_t).sqrt();
    let eps_coef = (1.0 - abar_next).sqrt() - z0_coef * (1.0 - abar_t).sqrt();
    Ok(LatentGrid { values: &z_t.values * (z0_coef as f32) + &eps_pred.values * (eps_coef as f32) })
}

/// One ancestral reverse step from `t` to `t - 1`.
///
/// Posterior mean `(z_t - (beta_t / sqrt(1 - alphabar_t)) eps_hat) / sqrt(alpha_t)`
/// plus `sqrt(betatilde_t) * noise`. The final step `t = 1` has zero posterior
/// variance, so its `noise` must be all-zeros.
pub fn ddpm_step(
    z_t: &LatentGrid,
    eps_pred: &NoisePrediction,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidArg(format!("t={t} out of range 1..={}", sched.steps())));
    }
    if !z_t.same_shape(eps_pred) || !z_t.same_shape(noise) {
        return Err(Error::ShapeMismatch("z_t, eps_pred and noise must share a shape".into()));
    }
    if t == 1 && noise.values.iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidArg("noise must be all-zeros at t=1".into()));
    }

    let alpha_t = sched.alpha(t);
    let beta_t = sched.beta(t);
    let abar_t = sched.alphabar(t);
    let abar_prev = sched.alphabar(t - 1);

    let mean_scale = 1.0 / alpha_t.sqrt();
    let eps_scale = mean_scale * beta_t / (1.0 - abar_t).sqrt();
    let betatilde = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t;

    let values = &z_t.values * (mean_scale as f32) - &eps_pred.values * (eps_scale as f32)
        + &noise.values * (betatilde.sqrt() as f32);
    Ok(LatentGrid { values })
}

/// Descending inference timesteps: `steps` values spaced uniformly over
/// `[1, t_max]`, deduplicated, largest first. A sampling chain walks
/// consecutive pairs and finishes with a step to 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if t_max == 0 || steps == 0 {
        return Err(Error::InvalidArg("t_max and steps must be positive".into()));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|i| ((i as f64 / steps as f64) * t_max as f64).round().max(1.0) as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_schedule;
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(vals: Array4<f32>) -> LatentGrid {
        LatentGrid { values: vals }
    }

    fn random_grid(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentGrid {
        sample_noise_grid(shape.0, shape.1, shape.2, shape.3, rng)
    }

    #[test]
    fn corrupt_t0_is_identity() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = random_grid((2, 3, 4, 4), &mut rng);
        let eps = random_grid((2, 3, 4, 4), &mut rng);
        let z = forward_corrupt(&z0, 0, &eps, &sched).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn corrupt_zero_signal() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = grid_from(Array4::zeros((1, 2, 3, 3)));
        let eps = random_grid((1, 2, 3, 3), &mut rng);
        let t = 7;
        let z = forward_corrupt(&z0, t, &eps, &sched).unwrap();
        let cb = (1.0 - sched.alphabar(t)).sqrt() as f32;
        for (a, b) in z.values.iter().zip(eps.values.iter()) {
            assert_relative_eq!(*a, cb * *b, max_relative = 1e-6);
        }
    }

    #[test]
    fn corrupt_shape_mismatch() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let z0 = grid_from(Array4::zeros((1, 2, 3, 3)));
        let eps = grid_from(Array4::zeros((1, 2, 3, 4)));
        assert!(forward_corrupt(&z0, 3, &eps, &sched).is_err());
    }

    #[test]
    fn corrupt_monte_carlo_moments() {
        // Monte-Carlo moment oracle: signal gain and pooled noise variance
        // estimated over 1e4 draws.
        let sched = build_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = random_grid((2, 1, 4, 4), &mut rng);
        let t = 100;
        let draws = 10_000;
        let abar = sched.alphabar(t);

        let z0_norm_sq: f64 = z0.values.iter().map(|v| (*v as f64).powi(2)).sum();
        let mut mean = Array4::<f64>::zeros(z0.values.dim());
        let mut sq_residual = 0.0f64;
        for _ in 0..draws {
            let eps = random_grid((2, 1, 4, 4), &mut rng);
            let z = forward_corrupt(&z0, t, &eps, &sched).unwrap();
            for ((m, z), z0v) in mean.iter_mut().zip(z.values.iter()).zip(z0.values.iter()) {
                *m += *z as f64;
                let r = *z as f64 - abar.sqrt() * *z0v as f64;
                sq_residual += r * r;
            }
        }
        mean /= draws as f64;
        // gain of the z0 direction in the sample mean
        let gain: f64 = mean
            .iter()
            .zip(z0.values.iter())
            .map(|(m, z)| m * *z as f64)
            .sum::<f64>()
            / z0_norm_sq;
        assert_relative_eq!(gain, abar.sqrt(), max_relative = 0.02);
        let var = sq_residual / (draws as f64 * z0.values.len() as f64);
        assert_relative_eq!(var, 1.0 - abar, max_relative = 0.02);
    }

    #[test]
    fn loss_trivials() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = random_grid((2, 3, 4, 4), &mut rng);
        assert_eq!(training_loss(&eps, &eps).unwrap(), 0.0);

        let neg = grid_from(-&eps.values);
        let mean_sq: f32 =
            eps.values.iter().map(|v| v * v).sum::<f32>() / eps.values.len() as f32;
        assert_relative_eq!(training_loss(&eps, &neg).unwrap(), 4.0 * mean_sq, max_relative = 1e-5);
    }

    #[test]
    fn loss_of_zero_predictor_near_one() {
        // E[eps^2] = 1 for standard-normal noise
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zeros = grid_from(Array4::zeros((1, 1, 10, 10)));
        let mut acc = 0.0f64;
        let draws = 10_000;
        for _ in 0..draws {
            let eps = random_grid((1, 1, 10, 10), &mut rng);
            acc += training_loss(&eps, &zeros).unwrap() as f64;
        }
        let avg = acc / draws as f64;
        assert!((avg - 1.0).abs() < 0.05, "avg {avg}");
    }

    #[test]
    fn ddim_round_trip_exact_eps() {
        let sched = build_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..20 {
            let z0 = random_grid((2, 2, 3, 3), &mut rng);
            let eps = random_grid((2, 2, 3, 3), &mut rng);
            let t = 1 + (case * 37) % 200;
            let z_t = forward_corrupt(&z0, t, &eps, &sched).unwrap();
            let back = ddim_step(&z_t, &eps, t, 0, &sched, 0.0, None).unwrap();
            let num: f64 = back
                .values
                .iter()
                .zip(z0.values.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            let den: f64 = z0.values.iter().map(|v| (*v as f64).powi(2)).sum();
            assert!((num / den).sqrt() <= 1e-5, "t={t} rel err {}", (num / den).sqrt());
        }
    }

    #[test]
    fn ddim_deterministic_at_eta_zero() {
        let sched = build_schedule(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random_grid((1, 2, 4, 4), &mut rng);
        let eps = random_grid((1, 2, 4, 4), &mut rng);
        let a = ddim_step(&z, &eps, 30, 10, &sched, 0.0, None).unwrap();
        let b = ddim_step(&z, &eps, 30, 10, &sched, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_rejects_bad_order() {
        let sched = build_schedule(50, 1e-3, 0.05).unwrap();
        let z = grid_from(Array4::zeros((1, 1, 2, 2)));
        assert!(ddim_step(&z, &z, 10, 10, &sched, 0.0, None).is_err());
        assert!(ddim_step(&z, &z, 10, 12, &sched, 0.0, None).is_err());
    }

    #[test]
    fn ddim_eta_needs_noise() {
        let sched = build_schedule(50, 1e-3, 0.05).unwrap();
        let z = grid_from(Array4::zeros((1, 1, 2, 2)));
        assert!(ddim_step(&z, &z, 10, 5, &sched, 0.5, None).is_err());
    }

    #[test]
    fn ddim_inversion_round_trip() {
        // invert then re-denoise with the same eps returns the input
        let sched = build_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = random_grid((1, 2, 4, 4), &mut rng);
        let eps = random_grid((1, 2, 4, 4), &mut rng);
        let up = ddim_invert_step(&z0, &eps, 0, 40, &sched).unwrap();
        let down = ddim_step(&up, &eps, 40, 0, &sched, 0.0, None).unwrap();
        for (a, b) in down.values.iter().zip(z0.values.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-4, epsilon = 1e-6);
        }
    }

    #[test]
    fn ddpm_single_step_round_trip() {
        let sched = build_schedule(1, 0.02, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = random_grid((1, 3, 4, 4), &mut rng);
        let eps = random_grid((1, 3, 4, 4), &mut rng);
        let z1 = forward_corrupt(&z0, 1, &eps, &sched).unwrap();
        let zeros = grid_from(Array4::zeros(z0.values.dim()));
        let back = ddpm_step(&z1, &eps, 1, &sched, &zeros).unwrap();
        let num: f64 = back
            .values
            .iter()
            .zip(z0.values.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = z0.values.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((num / den).sqrt() <= 1e-5);
    }

    #[test]
    fn ddpm_zero_noise_is_posterior_mean() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = random_grid((1, 1, 3, 3), &mut rng);
        let eps = random_grid((1, 1, 3, 3), &mut rng);
        let zeros = grid_from(Array4::zeros(z.values.dim()));
        let t = 5;
        let out = ddpm_step(&z, &eps, t, &sched, &zeros).unwrap();
        let ms = 1.0 / sched.alpha(t).sqrt();
        let es = ms * sched.beta(t) / (1.0 - sched.alphabar(t)).sqrt();
        for ((o, zv), ev) in out.values.iter().zip(z.values.iter()).zip(eps.values.iter()) {
            assert_relative_eq!(*o, ms as f32 * zv - es as f32 * ev, max_relative = 1e-5);
        }
    }

    #[test]
    fn ddpm_linearity_at_zero() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let z = grid_from(Array4::zeros((1, 1, 2, 2)));
        let out = ddpm_step(&z, &z, 5, &sched, &z).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ddpm_rejects_noise_at_final_step() {
        let sched = build_schedule(10, 0.01, 0.1).unwrap();
        let z = grid_from(Array4::zeros((1, 1, 2, 2)));
        let noise = grid_from(Array4::from_elem((1, 1, 2, 2), 0.5));
        assert!(ddpm_step(&z, &z, 1, &sched, &noise).is_err());
        assert!(ddpm_step(&z, &z, 0, &sched, &z).is_err());
        assert!(ddpm_step(&z, &z, 11, &sched, &z).is_err());
    }

    #[test]
    fn timestep_grid_spans_range() {
        let ts = ddim_timesteps(200, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 200);
        assert_eq!(*ts.last().unwrap(), 4);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));

        let dense = ddim_timesteps(5, 50).unwrap();
        assert_eq!(dense, vec![5, 4, 3, 2, 1]);
    }

    proptest! {
        #[test]
        fn corrupt_is_linear(scale in -3.0f32..3.0, t in 1usize..=20) {
            let sched = build_schedule(20, 1e-3, 0.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let z0 = random_grid((1, 2, 3, 3), &mut rng);
            let eps = random_grid((1, 2, 3, 3), &mut rng);
            let a = forward_corrupt(&z0, t, &eps, &sched).unwrap();
            let z0s = grid_from(&z0.values * scale);
            let epss = grid_from(&eps.values * scale);
            let b = forward_corrupt(&z0s, t, &epss, &sched).unwrap();
            for (x, y) in b.values.iter().zip(a.values.iter()) {
                prop_assert!((x - y * scale).abs() <= 1e-4);
            }
        }
    }
}
