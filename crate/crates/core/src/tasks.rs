//! Inference tasks built on the conditional sampler: scene transitions,
//! autoregressive video prediction, image animation, and story assembly.
//!
//! All tasks share one mechanism: pick a deterministic mask pattern, encode
//! the visible frames into the masked clean latent, run the reverse chain on
//! the conditional input, then restore the visible frames bit-exactly in the
//! decoded output. During sampling the conditioning enters only through the
//! mask and masked-latent channels; visible positions of `z_t` evolve freely.

use std::collections::BTreeMap;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode, encode, Codec};
use crate::data::{parse_caption, render_clip, tokenize, DEFAULT_FPS};
use crate::diffusion::{ddim_step, ddim_timesteps, sample_noise_grid};
use crate::error::{Error, Result};
use crate::grid::{Frame, VideoClip};
use crate::mask::{animation_mask, apply_mask, assemble_input, prediction_mask, transition_mask, FrameMask};
use crate::nn::{embed_caption, predict_noise, DenoiserParams};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    /// Inference steps spaced uniformly over `[1, T]`.
    pub steps: usize,
    /// Reverse-update noise scale; 0 is fully deterministic.
    pub eta: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct TransitionRequest {
    pub s1: Frame,
    pub s2: Frame,
    pub caption: String,
    pub n: usize,
    pub seed: u64,
    pub sampler: SamplerSettings,
}

/// Samples the frames a mask hides, conditioned on the visible frames and a
/// caption. Output frames at visible positions equal the provided frames
/// bit-exactly (restored after decoding).
#[allow(clippy::too_many_arguments)]
pub fn generate_conditional(
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    visible: &BTreeMap<usize, Frame>,
    mask: &FrameMask,
    caption: &str,
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    sampler: &SamplerSettings,
) -> Result<VideoClip> {
    if mask.len() != n {
        return Err(Error::ShapeMismatch(format!("mask length {} vs n={n}", mask.len())));
    }
    let vis_idx = mask.visible_indices();
    let provided: Vec<usize> = visible.keys().copied().collect();
    if provided != vis_idx {
        return Err(Error::InvalidArg(format!(
            "visible frame indices {provided:?} do not match mask 1-bits {vis_idx:?}"
        )));
    }
    for (i, f) in visible {
        if f.dim() != (3, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "visible frame {i} has shape {:?}, expected (3, {h}, {w})",
                f.dim()
            )));
        }
    }
    if sampler.steps == 0 {
        return Err(Error::InvalidArg("sampler needs at least one step".into()));
    }

    // visible frames packed into an otherwise-zero clip, then masked after
    // encoding so hidden latent frames are exactly zero
    let mut vis_frames = Array4::zeros((n, 3, h, w));
    for (i, f) in visible {
        vis_frames.index_axis_mut(ndarray::Axis(0), *i).assign(f);
    }
    let vis_clip = VideoClip::new(vis_frames, DEFAULT_FPS, caption)?;
    let z0_masked = apply_mask(&encode(codec, &vis_clip)?, mask)?;
    let (_, c, lh, lw) = z0_masked.shape();

    let tokens = tokenize(caption)?;
    let text = embed_caption(params, &tokens)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = sample_noise_grid(n, c, lh, lw, &mut rng);

    let ts = ddim_timesteps(sched.steps(), sampler.steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let input = assemble_input(&z, mask, &z0_masked)?;
        let eps = predict_noise(params, &input, t, &text)?;
        let noise = (sampler.eta > 0.0 && t_prev > 0)
            .then(|| sample_noise_grid(n, c, lh, lw, &mut rng));
        z = ddim_step(&z, &eps, t, t_prev, sched, sampler.eta, noise.as_ref())?;
    }

    let mut clip = decode(codec, &z)?;
    for (i, f) in visible {
        clip.frames.index_axis_mut(ndarray::Axis(0), *i).assign(f);
    }
    clip.caption = caption.to_string();
    clip.fps = DEFAULT_FPS;
    Ok(clip)
}

/// Generates the in-between frames connecting two scene images.
pub fn transition(
    req: &TransitionRequest,
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
) -> Result<VideoClip> {
    if req.s1.dim() != req.s2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scene images differ: {:?} vs {:?}",
            req.s1.dim(),
            req.s2.dim()
        )));
    }
    let (_, h, w) = req.s1.dim();
    let mask = transition_mask(req.n)?;
    let mut visible = BTreeMap::new();
    visible.insert(0, req.s1.clone());
    visible.insert(req.n - 1, req.s2.clone());
    generate_conditional(
        params, codec, sched, &visible, &mask, &req.caption, req.n, h, w, req.seed, &req.sampler,
    )
}

/// Extends a clip by repeatedly conditioning a fixed-size window on the last
/// `k` generated frames. Output length is `len + iterations * (window - k)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_autoregressive(
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    seed_clip: &VideoClip,
    iterations: usize,
    k: usize,
    window: usize,
    caption: &str,
    seed: u64,
    sampler: &SamplerSettings,
) -> Result<VideoClip> {
    if iterations == 0 {
        return Err(Error::InvalidArg("iterations must be >= 1".into()));
    }
    if k == 0 || seed_clip.len() < k {
        return Err(Error::InvalidArg(format!(
            "seed clip has {} frames, overlap k={k} needs at least k",
            seed_clip.len()
        )));
    }
    if window <= k {
        return Err(Error::InvalidArg(format!("window {window} must exceed overlap {k}")));
    }
    let (h, w) = seed_clip.dims();
    let mask = prediction_mask(window, k)?;

    let mut total = seed_clip.len() + iterations * (window - k);
    let mut frames = Array4::zeros((total, 3, h, w));
    frames
        .slice_mut(ndarray::s![0..seed_clip.len(), .., .., ..])
        .assign(&seed_clip.frames);
    total = seed_clip.len();

    for iter in 0..iterations {
        let mut visible = BTreeMap::new();
        for j in 0..k {
            visible.insert(j, frames.index_axis(ndarray::Axis(0), total - k + j).to_owned());
        }
        let win = generate_conditional(
            params,
            codec,
            sched,
            &visible,
            &mask,
            caption,
            window,
            h,
            w,
            seed.wrapping_add(iter as u64),
            sampler,
        )?;
        // overlap frames are already present; append the newly generated tail
        for j in k..window {
            frames
                .index_axis_mut(ndarray::Axis(0), total + j - k)
                .assign(&win.frame(j));
        }
        total += window - k;
    }
    VideoClip::new(frames, seed_clip.fps, caption)
}

/// Animates a reference image as the first frame of an `n`-frame clip.
#[allow(clippy::too_many_arguments)]
pub fn animate(
    image: &Frame,
    caption: &str,
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    sampler: &SamplerSettings,
) -> Result<VideoClip> {
    let (_, h, w) = image.dim();
    let mask = animation_mask(n)?;
    let mut visible = BTreeMap::new();
    visible.insert(0, image.clone());
    generate_conditional(params, codec, sched, &visible, &mask, caption, n, h, w, seed, sampler)
}

/// One story shot: either rendered from a caption or supplied pre-rendered.
#[derive(Debug, Clone)]
pub enum Shot {
    Rendered { caption: String, len: usize },
    Clip(VideoClip),
}

#[derive(Debug, Clone)]
pub struct JunctionSpec {
    pub caption: String,
    pub len: usize,
}

/// Ordered shots with one generated transition per junction.
#[derive(Debug, Clone)]
pub struct StoryBoard {
    pub shots: Vec<Shot>,
    pub junctions: Vec<JunctionSpec>,
}

impl StoryBoard {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() {
            return Err(Error::InvalidArg("storyboard has no shots".into()));
        }
        if self.junctions.len() + 1 != self.shots.len() {
            return Err(Error::InvalidArg(format!(
                "{} shots need {} junction(s), got {}",
                self.shots.len(),
                self.shots.len() - 1,
                self.junctions.len()
            )));
        }
        for j in &self.junctions {
            if j.len < 3 {
                return Err(Error::InvalidArg("transition lengths must be >= 3".into()));
            }
        }
        for s in &self.shots {
            if let Shot::Rendered { len, .. } = s {
                if *len == 0 {
                    return Err(Error::InvalidArg("shot lengths must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Shot,
    Transition,
}

impl SegmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            SegmentKind::Shot => "shot",
            SegmentKind::Transition => "transition",
        }
    }
}

/// Where each piece of an assembled story starts in the final clip.
#[derive(Debug, Clone)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub kind: SegmentKind,
    pub caption: String,
}

/// Renders the shots, generates one transition per junction, and stitches
/// everything into a single clip. Transition interiors drop their duplicated
/// endpoint frames, so each junction contributes `len - 2` frames.
#[allow(clippy::too_many_arguments)]
pub fn assemble_story(
    board: &StoryBoard,
    params: &DenoiserParams<f32>,
    codec: &Codec,
    sched: &NoiseSchedule,
    h: usize,
    w: usize,
    seed: u64,
    sampler: &SamplerSettings,
) -> Result<(VideoClip, Vec<Segment>)> {
    board.validate()?;

    let shots: Vec<(VideoClip, String)> = board
        .shots
        .iter()
        .map(|s| match s {
            Shot::Rendered { caption, len } => {
                let spec = parse_caption(caption)?;
                Ok((render_clip(&spec, *len, h, w)?, caption.clone()))
            }
            Shot::Clip(clip) => {
                if clip.dims() != (h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "pre-rendered shot is {:?}, story is {h}x{w}",
                        clip.dims()
                    )));
                }
                Ok((clip.clone(), clip.caption.clone()))
            }
        })
        .collect::<Result<_>>()?;

    let mut pieces: Vec<(Array4<f32>, SegmentKind, String)> = Vec::new();
    for (i, (shot, caption)) in shots.iter().enumerate() {
        pieces.push((shot.frames.clone(), SegmentKind::Shot, caption.clone()));
        if i + 1 < shots.len() {
            let junction = &board.junctions[i];
            let req = TransitionRequest {
                s1: shot.frame_owned(shot.len() - 1),
                s2: shots[i + 1].0.frame_owned(0),
                caption: junction.caption.clone(),
                n: junction.len,
                seed: seed.wrapping_add(i as u64 + 1),
                sampler: *sampler,
            };
            let trans = transition(&req, params, codec, sched)?;
            let interior = trans
                .frames
                .slice(ndarray::s![1..junction.len - 1, .., .., ..])
                .to_owned();
            pieces.push((interior, SegmentKind::Transition, junction.caption.clone()));
        }
    }

    let total: usize = pieces.iter().map(|(f, _, _)| f.dim().0).sum();
    let mut frames = Array4::zeros((total, 3, h, w));
    let mut manifest = Vec::with_capacity(pieces.len());
    let mut at = 0usize;
    for (piece, kind, caption) in pieces {
        let len = piece.dim().0;
        frames.slice_mut(ndarray::s![at..at + len, .., .., ..]).assign(&piece);
        manifest.push(Segment { start: at, len, kind, caption });
        at += len;
    }
    let caption = shots[0].1.clone();
    Ok((VideoClip::new(frames, DEFAULT_FPS, caption)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, make_scene_pair};
    use crate::nn::ArchConfig;
    use crate::schedule::build_schedule;

    fn tiny_model() -> (DenoiserParams<f32>, Codec, NoiseSchedule) {
        let mut arch = ArchConfig::tiny();
        arch.latent_channels = 3;
        (
            DenoiserParams::<f32>::init(&arch, 1).unwrap(),
            Codec::Identity,
            build_schedule(40, 1e-3, 0.03).unwrap(),
        )
    }

    fn fast_sampler() -> SamplerSettings {
        SamplerSettings { steps: 4, eta: 0.0 }
    }

    #[test]
    fn transition_pins_endpoints_bit_exactly() {
        let (params, codec, sched) = tiny_model();
        let pair = make_scene_pair(3, 16, 8, 8).unwrap();
        let req = TransitionRequest {
            s1: pair.s1.clone(),
            s2: pair.s2.clone(),
            caption: pair.caption.clone(),
            n: 16,
            seed: 7,
            sampler: fast_sampler(),
        };
        let clip = transition(&req, &params, &codec, &sched).unwrap();
        assert_eq!(clip.len(), 16);
        assert_eq!(clip.frame(0).to_owned(), pair.s1);
        assert_eq!(clip.frame(15).to_owned(), pair.s2);

        // different seed: same endpoints, different interior
        let req2 = TransitionRequest { seed: 8, ..req.clone() };
        let clip2 = transition(&req2, &params, &codec, &sched).unwrap();
        assert_eq!(clip2.frame(0).to_owned(), pair.s1);
        assert_eq!(clip2.frame(15).to_owned(), pair.s2);
        assert_ne!(clip.frames, clip2.frames);

        // same seed: bit-identical
        let clip3 = transition(&req, &params, &codec, &sched).unwrap();
        assert_eq!(clip.frames, clip3.frames);
    }

    #[test]
    fn all_ones_mask_returns_input_clip() {
        let (params, codec, sched) = tiny_model();
        let clip = make_dataset(1, 5, 4, 8, 8).unwrap().remove(0);
        let mask = FrameMask::from_bits(vec![1; 4]).unwrap();
        let visible: BTreeMap<usize, Frame> =
            (0..4).map(|i| (i, clip.frame_owned(i))).collect();
        let out = generate_conditional(
            &params, &codec, &sched, &visible, &mask, &clip.caption, 4, 8, 8, 3,
            &fast_sampler(),
        )
        .unwrap();
        assert_eq!(out.frames, clip.frames);
    }

    #[test]
    fn visible_indices_must_match_mask() {
        let (params, codec, sched) = tiny_model();
        let clip = make_dataset(1, 5, 4, 8, 8).unwrap().remove(0);
        let mask = FrameMask::from_bits(vec![1, 0, 0, 1]).unwrap();
        let mut visible = BTreeMap::new();
        visible.insert(0, clip.frame_owned(0));
        visible.insert(2, clip.frame_owned(2)); // wrong index
        let err = generate_conditional(
            &params, &codec, &sched, &visible, &mask, &clip.caption, 4, 8, 8, 3,
            &fast_sampler(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn transition_rejects_mismatched_scenes() {
        let (params, codec, sched) = tiny_model();
        let a = make_scene_pair(1, 8, 8, 8).unwrap();
        let b = make_scene_pair(2, 8, 8, 10).unwrap();
        let req = TransitionRequest {
            s1: a.s1,
            s2: b.s2,
            caption: a.caption,
            n: 8,
            seed: 0,
            sampler: fast_sampler(),
        };
        assert!(transition(&req, &params, &codec, &sched).is_err());
    }

    #[test]
    fn autoregressive_length_law_and_overlap() {
        let (params, codec, sched) = tiny_model();
        let seed_clip = make_dataset(1, 6, 16, 8, 8).unwrap().remove(0);
        let out = predict_autoregressive(
            &params,
            &codec,
            &sched,
            &seed_clip,
            3,
            2,
            16,
            &seed_clip.caption.clone(),
            11,
            &fast_sampler(),
        )
        .unwrap();
        assert_eq!(out.len(), 16 + 3 * 14);
        // the seed prefix is preserved bit-exactly
        assert_eq!(
            out.frames.slice(ndarray::s![0..16, .., .., ..]),
            seed_clip.frames.view()
        );
    }

    #[test]
    fn autoregressive_rejects_bad_args() {
        let (params, codec, sched) = tiny_model();
        let clip = make_dataset(1, 6, 4, 8, 8).unwrap().remove(0);
        let s = fast_sampler();
        assert!(predict_autoregressive(&params, &codec, &sched, &clip, 0, 2, 8, "", 0, &s).is_err());
        assert!(predict_autoregressive(&params, &codec, &sched, &clip, 1, 0, 8, "", 0, &s).is_err());
        assert!(predict_autoregressive(&params, &codec, &sched, &clip, 1, 8, 8, "", 0, &s).is_err());
        assert!(predict_autoregressive(&params, &codec, &sched, &clip, 1, 5, 4, "", 0, &s).is_err());
    }

    #[test]
    fn story_concatenation_arithmetic() {
        let (params, codec, sched) = tiny_model();
        let board = StoryBoard {
            shots: vec![
                Shot::Rendered {
                    caption: "a red circle staying still on a white background".into(),
                    len: 16,
                },
                Shot::Rendered {
                    caption: "a blue square staying still on a white background".into(),
                    len: 16,
                },
            ],
            junctions: vec![JunctionSpec {
                caption: "a red circle staying still on a white background".into(),
                len: 16,
            }],
        };
        let (clip, manifest) =
            assemble_story(&board, &params, &codec, &sched, 8, 8, 5, &fast_sampler()).unwrap();
        assert_eq!(clip.len(), 16 + 14 + 16);
        assert_eq!(manifest.len(), 3);
        assert_eq!(manifest.iter().map(|s| s.len).sum::<usize>(), clip.len());
        assert_eq!(manifest[1].kind, SegmentKind::Transition);
        assert_eq!(manifest[1].start, 16);
        // junction endpoints dropped: first transition frame differs from the
        // shot boundary frames only through generation, but the shot frames
        // themselves are intact
        assert_eq!(
            clip.frames.slice(ndarray::s![0..16, .., .., ..]),
            render_clip(&parse_caption(&board_shot_caption(&board, 0)).unwrap(), 16, 8, 8)
                .unwrap()
                .frames
                .view()
        );
    }

    fn board_shot_caption(board: &StoryBoard, i: usize) -> String {
        match &board.shots[i] {
            Shot::Rendered { caption, .. } => caption.clone(),
            Shot::Clip(c) => c.caption.clone(),
        }
    }

    #[test]
    fn single_shot_story_is_identity() {
        let (params, codec, sched) = tiny_model();
        let clip = make_dataset(1, 9, 5, 8, 8).unwrap().remove(0);
        let board = StoryBoard { shots: vec![Shot::Clip(clip.clone())], junctions: vec![] };
        let (out, manifest) =
            assemble_story(&board, &params, &codec, &sched, 8, 8, 0, &fast_sampler()).unwrap();
        assert_eq!(out.frames, clip.frames);
        assert_eq!(manifest.len(), 1);
        assert_eq!(manifest[0].kind, SegmentKind::Shot);
    }

    #[test]
    fn storyboard_validation() {
        let bad = StoryBoard {
            shots: vec![Shot::Rendered { caption: "x".into(), len: 4 }],
            junctions: vec![JunctionSpec { caption: "y".into(), len: 4 }],
        };
        assert!(bad.validate().is_err());
        let short_junction = StoryBoard {
            shots: vec![
                Shot::Rendered { caption: "x".into(), len: 4 },
                Shot::Rendered { caption: "y".into(), len: 4 },
            ],
            junctions: vec![JunctionSpec { caption: "z".into(), len: 2 }],
        };
        assert!(short_junction.validate().is_err());
        assert!(StoryBoard { shots: vec![], junctions: vec![] }.validate().is_err());
    }
}
