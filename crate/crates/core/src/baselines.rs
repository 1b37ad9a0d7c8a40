//! Comparison transition generators: cross-dissolve, correspondence-driven
//! affine morphing, latent-space interpolation, and inversion-plus-
//! interpolation through the trained model.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use ndarray::{Array3, Array4};

use crate::codec::{decode, encode, Codec};
use crate::data::{tokenize, DEFAULT_FPS};
use crate::diffusion::{ddim_invert_step, ddim_step, ddim_timesteps};
use crate::error::{Error, Result};
use crate::grid::{Frame, LatentGrid, VideoClip};
use crate::mask::{assemble_input, FrameMask};
use crate::nn::{embed_caption, predict_noise, DenoiserParams};
use crate::schedule::NoiseSchedule;
use crate::tasks::SamplerSettings;

/// Linear blend `a + lambda (b - a)` with exact endpoints. Shared by every
/// interpolating baseline so identical inputs produce bit-identical blends.
fn lerp(a: &Array3<f32>, b: &Array3<f32>, lambda: f32) -> Array3<f32> {
    if lambda == 0.0 {
        return a.clone();
    }
    if lambda == 1.0 {
        return b.clone();
    }
    a + (b - a) * lambda
}

fn blend_weights(n: usize) -> Vec<f32> {
    (0..n).map(|i| i as f32 / (n - 1) as f32).collect()
}

fn check_pair(s1: &Frame, s2: &Frame, n: usize) -> Result<()> {
    if s1.dim() != s2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scene images differ: {:?} vs {:?}",
            s1.dim(),
            s2.dim()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArg("need at least 2 frames".into()));
    }
    Ok(())
}

/// Linear pixel blend, `frame_i = (1 - i/(n-1)) S1 + (i/(n-1)) S2`.
pub fn cross_dissolve(s1: &Frame, s2: &Frame, n: usize) -> Result<VideoClip> {
    check_pair(s1, s2, n)?;
    let (_, h, w) = s1.dim();
    let mut frames = Array4::zeros((n, 3, h, w));
    for (i, lambda) in blend_weights(n).into_iter().enumerate() {
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&lerp(s1, s2, lambda));
    }
    VideoClip::new(frames, DEFAULT_FPS, "")
}

/// Least-squares affine transform mapping `points1` onto `points2`,
/// homogeneous 3x3. At least 3 non-collinear pairs required.
fn fit_affine(points1: &[(f64, f64)], points2: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    if points1.len() != points2.len() {
        return Err(Error::InvalidArg("point lists differ in length".into()));
    }
    if points1.len() < 3 {
        return Err(Error::InvalidArg(format!(
            "affine fit needs >= 3 point pairs, got {}",
            points1.len()
        )));
    }
    let mut mtm = Matrix3::<f64>::zeros();
    let mut mtx = Matrix3::<f64>::zeros(); // columns: targets x', y', (unused)
    for ((x, y), (xp, yp)) in points1.iter().zip(points2.iter()) {
        let row = Vector3::new(*x, *y, 1.0);
        mtm += row * row.transpose();
        mtx += row * Vector3::new(*xp, *yp, 0.0).transpose();
    }
    let scale = mtm.norm().max(1.0);
    let det = mtm.determinant();
    if det.abs() < 1e-9 * scale.powi(3) {
        return Err(Error::Numerical("degenerate correspondences (collinear points)".into()));
    }
    let inv = mtm
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular normal equations".into()))?;
    let sol = inv * mtx; // 3x3, first two columns are the affine rows transposed
    let mut a = Matrix3::identity();
    a[(0, 0)] = sol[(0, 0)];
    a[(0, 1)] = sol[(1, 0)];
    a[(0, 2)] = sol[(2, 0)];
    a[(1, 0)] = sol[(0, 1)];
    a[(1, 1)] = sol[(1, 1)];
    a[(1, 2)] = sol[(2, 1)];
    Ok(a)
}

/// `I + f (A - I)` in parameter space; exactly the identity when `A = I`.
fn affine_fraction(a: &Matrix3<f64>, f: f64) -> Matrix3<f64> {
    Matrix3::identity() + (a - Matrix3::identity()) * f
}

/// Inverse-samples `img` under the forward map `m`: output pixel (x, y)
/// reads `img` at `m^-1 (x, y)`, bilinear, edge-clamped.
fn warp(img: &Frame, m: &Matrix3<f64>) -> Result<Frame> {
    let (_, h, w) = img.dim();
    let lin = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let lin_inv = lin
        .try_inverse()
        .ok_or_else(|| Error::Numerical("non-invertible warp".into()))?;
    let t = Vector2::new(m[(0, 2)], m[(1, 2)]);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let src = lin_inv * (Vector2::new(x as f64, y as f64) - t);
            let sx = src.x.clamp(0.0, (w - 1) as f64);
            let sy = src.y.clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            for c in 0..3 {
                let top = img[[c, y0, x0]] * (1.0 - fx) + img[[c, y0, x1]] * fx;
                let bot = img[[c, y1, x0]] * (1.0 - fx) + img[[c, y1, x1]] * fx;
                out[[c, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Affine morph: estimates a least-squares affine map from matched points,
/// warps `S1` forward by the `lambda` fraction of it and `S2` backward by the
/// `(1 - lambda)` fraction of its inverse, then cross-blends.
pub fn morph_with_correspondences(
    s1: &Frame,
    s2: &Frame,
    points1: &[(f64, f64)],
    points2: &[(f64, f64)],
    n: usize,
) -> Result<VideoClip> {
    check_pair(s1, s2, n)?;
    let a = fit_affine(points1, points2)?;
    let a_inv = a
        .try_inverse()
        .ok_or_else(|| Error::Numerical("estimated affine is not invertible".into()))?;
    let (_, h, w) = s1.dim();
    let mut frames = Array4::zeros((n, 3, h, w));
    for (i, lambda) in blend_weights(n).into_iter().enumerate() {
        let w1 = warp(s1, &affine_fraction(&a, lambda as f64))?;
        let w2 = warp(s2, &affine_fraction(&a_inv, 1.0 - lambda as f64))?;
        frames
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&lerp(&w1, &w2, lambda).mapv(|v| v.clamp(-1.0, 1.0)));
    }
    VideoClip::new(frames, DEFAULT_FPS, "")
}

/// Encodes both endpoints, interpolates linearly in latent space, decodes
/// each blend. With the identity codec this equals [`cross_dissolve`]
/// bit-exactly.
pub fn latent_interp(codec: &Codec, s1: &Frame, s2: &Frame, n: usize) -> Result<VideoClip> {
    check_pair(s1, s2, n)?;
    let (_, h, w) = s1.dim();
    let single = |f: &Frame| -> Result<LatentGrid> {
        let mut frames = Array4::zeros((1, 3, h, w));
        frames.index_axis_mut(ndarray::Axis(0), 0).assign(f);
        encode(codec, &VideoClip::new(frames, DEFAULT_FPS, "")?)
    };
    let z1 = single(s1)?;
    let z2 = single(s2)?;
    let mut frames = Array4::zeros((n, 3, h, w));
    for (i, lambda) in blend_weights(n).into_iter().enumerate() {
        let z1f = z1.values.index_axis(ndarray::Axis(0), 0).to_owned();
        let z2f = z2.values.index_axis(ndarray::Axis(0), 0).to_owned();
        let zi = lerp(&z1f, &z2f, lambda);
        let (zc, zh, zw) = zi.dim();
        let grid = LatentGrid {
            values: zi.into_shape_with_order((1, zc, zh, zw)).unwrap(),
        };
        let out = decode(codec, &grid)?;
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&out.frame(0));
    }
    VideoClip::new(frames, DEFAULT_FPS, "")
}

/// Inverts a single frame to its terminal latent along the deterministic
/// chain, using the model unconditionally (all-zero mask).
fn ddim_invert_frame(
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    frame: &Frame,
    caption: &str,
    steps: usize,
) -> Result<LatentGrid> {
    let (_, h, w) = frame.dim();
    let mut frames = Array4::zeros((1, 3, h, w));
    frames.index_axis_mut(ndarray::Axis(0), 0).assign(frame);
    let mut z = encode(codec, &VideoClip::new(frames, DEFAULT_FPS, caption)?)?;

    let mask = FrameMask::from_bits(vec![0])?;
    let (n, c, lh, lw) = z.shape();
    let zeros = LatentGrid::zeros(n, c, lh, lw);
    let text = embed_caption(params, &tokenize(caption)?)?;

    let mut ts = ddim_timesteps(sched.steps(), steps)?;
    ts.reverse(); // ascending
    let mut t_cur = 0usize;
    for &t_next in &ts {
        let input = assemble_input(&z, &mask, &zeros)?;
        let eps = predict_noise(params, &input, t_cur.max(1), &text)?;
        z = ddim_invert_step(&z, &eps, t_cur, t_next, sched)?;
        t_cur = t_next;
    }
    Ok(z)
}

fn ddim_denoise_latent(
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    z_t: &LatentGrid,
    caption: &str,
    steps: usize,
) -> Result<Frame> {
    let mask = FrameMask::from_bits(vec![0])?;
    let (n, c, lh, lw) = z_t.shape();
    let zeros = LatentGrid::zeros(n, c, lh, lw);
    let text = embed_caption(params, &tokenize(caption)?)?;

    let ts = ddim_timesteps(sched.steps(), steps)?;
    let mut z = z_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let input = assemble_input(&z, &mask, &zeros)?;
        let eps = predict_noise(params, &input, t, &text)?;
        z = ddim_step(&z, &eps, t, t_prev, sched, 0.0, None)?;
    }
    Ok(decode(codec, &z)?.frame_owned(0))
}

/// Inversion-plus-interpolation: DDIM-invert both endpoints, interpolate the
/// terminal latents linearly, re-denoise each blend deterministically.
#[allow(clippy::too_many_arguments)]
pub fn inversion_interp(
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    s1: &Frame,
    s2: &Frame,
    caption: &str,
    n: usize,
    sampler: &SamplerSettings,
) -> Result<VideoClip> {
    check_pair(s1, s2, n)?;
    if sampler.steps == 0 {
        return Err(Error::InvalidArg("inversion needs at least one step".into()));
    }
    let z1 = ddim_invert_frame(params, codec, sched, s1, caption, sampler.steps)?;
    let z2 = ddim_invert_frame(params, codec, sched, s2, caption, sampler.steps)?;
    let (_, h, w) = s1.dim();
    let mut frames = Array4::zeros((n, 3, h, w));
    for (i, lambda) in blend_weights(n).into_iter().enumerate() {
        let zi = LatentGrid { values: &z1.values * (1.0 - lambda) + &z2.values * lambda };
        let frame = ddim_denoise_latent(params, codec, sched, &zi, caption, sampler.steps)?;
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&frame);
    }
    VideoClip::new(frames, DEFAULT_FPS, caption)
}

/// Visible conditioning frames used by the generative model at this slot; a
/// helper shared with CLI plumbing.
pub fn endpoints_map(s1: &Frame, s2: &Frame, n: usize) -> BTreeMap<usize, Frame> {
    let mut m = BTreeMap::new();
    m.insert(0, s1.clone());
    m.insert(n - 1, s2.clone());
    m
}
