//! Encoder/decoder between pixel clips and latent grids.
//!
//! The default identity codec reinterprets pixels as a 3-channel latent, so
//! diffusion behavior stays directly inspectable in pixel space. A small
//! learned autoencoder (two convs down, two convs up, spatial downscale 2)
//! is available behind the same interface.

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, VideoClip};
use crate::nn::layers::{conv2d_bwd, conv2d_fwd, silu_bwd, silu_fwd, upsample2_bwd, upsample2_fwd, Conv2d};
use crate::nn::randn;

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Identity,
    Learned(LearnedCodec),
}

impl Codec {
    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Identity => 3,
            Codec::Learned(lc) => lc.latent_channels,
        }
    }

    pub fn downscale(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Learned(lc) => lc.downscale,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Codec::Identity => "identity",
            Codec::Learned(_) => "learned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedCodec {
    pub latent_channels: usize,
    pub downscale: usize,
    pub enc1: Conv2d<f32>,
    pub enc2: Conv2d<f32>,
    pub dec1: Conv2d<f32>,
    pub dec2: Conv2d<f32>,
}

impl LearnedCodec {
    pub fn init(latent_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |cout: usize, cin: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * 9) as f64).sqrt() as f32;
            Conv2d {
                w: Array4::from_shape_fn((cout, cin, 3, 3), |_| randn::<f32, _>(rng) * std),
                b: Array1::zeros(cout),
            }
        };
        LearnedCodec {
            latent_channels,
            downscale: 2,
            enc1: conv(hidden, 3, &mut rng),
            enc2: conv(latent_channels, hidden, &mut rng),
            dec1: conv(hidden, latent_channels, &mut rng),
            dec2: conv(3, hidden, &mut rng),
        }
    }

    fn encode_frames(&self, x: &Array4<f32>) -> Array4<f32> {
        let h = silu_fwd(&conv2d_fwd(&self.enc1, x, 2));
        conv2d_fwd(&self.enc2, &h, 1)
    }

    fn decode_frames(&self, z: &Array4<f32>) -> Array4<f32> {
        let h = silu_fwd(&conv2d_fwd(&self.dec1, z, 1));
        let up = upsample2_fwd(&h);
        conv2d_fwd(&self.dec2, &up, 1).mapv(f32::tanh)
    }
}

/// Encodes a pixel clip into the latent grid. Identity reinterprets values;
/// the learned codec maps to `n x c x (h/2) x (w/2)`.
pub fn encode(codec: &Codec, clip: &VideoClip) -> Result<LatentGrid> {
    match codec {
        Codec::Identity => Ok(LatentGrid { values: clip.frames.clone() }),
        Codec::Learned(lc) => {
            let (h, w) = clip.dims();
            if h % lc.downscale != 0 || w % lc.downscale != 0 {
                return Err(Error::InvalidArg(format!(
                    "resolution {h}x{w} not divisible by downscale {}",
                    lc.downscale
                )));
            }
            Ok(LatentGrid { values: lc.encode_frames(&clip.frames) })
        }
    }
}

/// Decodes a latent grid back to pixels, clamped to `[-1, 1]`.
pub fn decode(codec: &Codec, z: &LatentGrid) -> Result<VideoClip> {
    let values = match codec {
        Codec::Identity => {
            if z.shape().1 != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "identity codec decodes 3-channel latents, got {}",
                    z.shape().1
                )));
            }
            z.values.mapv(|v| v.clamp(-1.0, 1.0))
        }
        Codec::Learned(lc) => {
            if z.shape().1 != lc.latent_channels {
                return Err(Error::ShapeMismatch(format!(
                    "latent has {} channels, codec expects {}",
                    z.shape().1,
                    lc.latent_channels
                )));
            }
            lc.decode_frames(&z.values)
        }
    };
    VideoClip::new(values, crate::data::DEFAULT_FPS, "")
}

/// Mean absolute reconstruction error of `decode(encode(clip))`.
pub fn reconstruction_mae(codec: &Codec, clip: &VideoClip) -> Result<f32> {
    let recon = decode(codec, &encode(codec, clip)?)?;
    let n = clip.frames.len() as f64;
    let sum: f64 = clip
        .frames
        .iter()
        .zip(recon.frames.iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok((sum / n) as f32)
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub latent_channels: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 3e-3, hidden: 16, latent_channels: 4, seed: 0 }
    }
}

/// Trains the autoencoder on the full frame set of `clips` with Adam on MSE.
pub fn train_codec(clips: &[VideoClip], cfg: &CodecTrainConfig) -> Result<LearnedCodec> {
    if clips.is_empty() {
        return Err(Error::InvalidArg("codec training needs at least one clip".into()));
    }
    let (h, w) = clips[0].dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArg("codec training needs even frame dims".into()));
    }
    let total_frames: usize = clips.iter().map(|c| c.len()).sum();
    let mut x = Array4::zeros((total_frames, 3, h, w));
    let mut row = 0;
    for clip in clips {
        if clip.dims() != (h, w) {
            return Err(Error::ShapeMismatch("codec training clips must share dims".into()));
        }
        for i in 0..clip.len() {
            x.index_axis_mut(ndarray::Axis(0), row).assign(&clip.frame(i));
            row += 1;
        }
    }

    let mut lc = LearnedCodec::init(cfg.latent_channels, cfg.hidden, cfg.seed);
    let mut adam = VecAdam::new(cfg.lr as f32);
    let count = x.len() as f32;

    for _ in 0..cfg.steps {
        // forward with caches
        let e1 = conv2d_fwd(&lc.enc1, &x, 2);
        let e1a = silu_fwd(&e1);
        let z = conv2d_fwd(&lc.enc2, &e1a, 1);
        let d1 = conv2d_fwd(&lc.dec1, &z, 1);
        let d1a = silu_fwd(&d1);
        let up = upsample2_fwd(&d1a);
        let pre = conv2d_fwd(&lc.dec2, &up, 1);
        let y = pre.mapv(f32::tanh);

        let residual = &y - &x;
        // d/dpre of mse through tanh
        let dpre = ndarray::Zip::from(&residual)
            .and(&y)
            .map_collect(|r, yv| 2.0 * r * (1.0 - yv * yv) / count);
        let (dup, g_dec2) = conv2d_bwd(&lc.dec2, &up, &dpre, 1);
        let dd1a = upsample2_bwd(&dup);
        let dd1 = silu_bwd(&d1, &dd1a);
        let (dz, g_dec1) = conv2d_bwd(&lc.dec1, &z, &dd1, 1);
        let (de1a, g_enc2) = conv2d_bwd(&lc.enc2, &e1a, &dz, 1);
        let de1 = silu_bwd(&e1, &de1a);
        let (_, g_enc1) = conv2d_bwd(&lc.enc1, &x, &de1, 2);

        adam.update(&mut lc, &[g_enc1, g_enc2, g_dec1, g_dec2]);
    }
    Ok(lc)
}

/// Minimal Adam over the four conv layers of the autoencoder.
struct VecAdam {
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl VecAdam {
    fn new(lr: f32) -> Self {
        Self { lr, step: 0, m: Vec::new(), v: Vec::new() }
    }

    fn update(&mut self, lc: &mut LearnedCodec, grads: &[Conv2d<f32>; 4]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - B1.powi(self.step);
        let bc2 = 1.0 - B2.powi(self.step);
        let layers = [&mut lc.enc1, &mut lc.enc2, &mut lc.dec1, &mut lc.dec2];
        let mut flat: Vec<(&mut f32, f32)> = Vec::new();
        for (layer, grad) in layers.into_iter().zip(grads.iter()) {
            flat.extend(layer.w.iter_mut().zip(grad.w.iter().copied()));
            flat.extend(layer.b.iter_mut().zip(grad.b.iter().copied()));
        }
        if self.m.is_empty() {
            self.m = vec![vec![0.0; flat.len()]];
            self.v = vec![vec![0.0; flat.len()]];
        }
        for (i, (p, g)) in flat.into_iter().enumerate() {
            let m = &mut self.m[0][i];
            let v = &mut self.v[0][i];
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, render_clip, Motion, SceneSpec, Shape, ShapeColor, BgColor};

    fn demo_clip() -> VideoClip {
        let spec = SceneSpec {
            shape: Shape::Square,
            color: ShapeColor::Blue,
            bg: BgColor::Gray,
            motion: Motion::LeftToRight,
            size_frac: 0.3,
        };
        render_clip(&spec, 4, 16, 16).unwrap()
    }

    #[test]
    fn identity_round_trip_is_bit_exact() {
        let clip = demo_clip();
        let z = encode(&Codec::Identity, &clip).unwrap();
        assert_eq!(z.values, clip.frames);
        let back = decode(&Codec::Identity, &z).unwrap();
        assert_eq!(back.frames, clip.frames);
    }

    #[test]
    fn identity_decode_of_zeros_is_mid_gray() {
        let z = LatentGrid::zeros(2, 3, 8, 8);
        let clip = decode(&Codec::Identity, &z).unwrap();
        assert!(clip.frames.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_decode_clamps() {
        let mut z = LatentGrid::zeros(1, 3, 8, 8);
        z.values[[0, 0, 0, 0]] = 3.5;
        z.values[[0, 1, 2, 2]] = -9.0;
        let clip = decode(&Codec::Identity, &z).unwrap();
        assert_eq!(clip.frames[[0, 0, 0, 0]], 1.0);
        assert_eq!(clip.frames[[0, 1, 2, 2]], -1.0);
    }

    #[test]
    fn learned_codec_shapes() {
        let lc = LearnedCodec::init(4, 8, 1);
        let clip = demo_clip();
        let z = encode(&Codec::Learned(lc.clone()), &clip).unwrap();
        assert_eq!(z.shape(), (4, 4, 8, 8));
        let back = decode(&Codec::Learned(lc), &z).unwrap();
        assert_eq!(back.frames.dim(), (4, 3, 16, 16));
        assert!(back.frames.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn learned_codec_rejects_odd_dims() {
        let lc = LearnedCodec::init(4, 8, 1);
        let spec = SceneSpec {
            shape: Shape::Circle,
            color: ShapeColor::Red,
            bg: BgColor::White,
            motion: Motion::Static,
            size_frac: 0.3,
        };
        let clip = render_clip(&spec, 2, 9, 16).unwrap();
        assert!(encode(&Codec::Learned(lc), &clip).is_err());
    }

    #[test]
    fn frame_independence() {
        // encoding frame i does not depend on other frames
        let clip = demo_clip();
        let lc = LearnedCodec::init(4, 8, 2);
        let codec = Codec::Learned(lc);
        let z_full = encode(&codec, &clip).unwrap();
        let single = VideoClip::new(
            clip.frames.slice(ndarray::s![1..2, .., .., ..]).to_owned(),
            clip.fps,
            "",
        )
        .unwrap();
        let z_one = encode(&codec, &single).unwrap();
        let diff = (&z_full.values.index_axis(ndarray::Axis(0), 1) - &z_one.values.index_axis(ndarray::Axis(0), 0))
            .iter()
            .map(|v| v.abs())
            .fold(0.0f32, f32::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn trained_codec_reconstructs_training_clips() {
        let clips = make_dataset(2, 11, 4, 16, 16).unwrap();
        let cfg = CodecTrainConfig { steps: 350, lr: 4e-3, hidden: 16, latent_channels: 4, seed: 3 };
        let lc = train_codec(&clips, &cfg).unwrap();
        let codec = Codec::Learned(lc);
        for clip in &clips {
            let mae = reconstruction_mae(&codec, clip).unwrap();
            assert!(mae < 0.05, "codec reconstruction MAE {mae}");
        }
    }
}
