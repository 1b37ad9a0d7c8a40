//! Procedural synthetic-video dataset: captioned clips of a single colored
//! shape moving over a flat background.
//!
//! The caption grammar is `a <color> <shape> <motion-phrase> on a <bg>
//! background` and is bijective with the categorical fields of a
//! [`SceneSpec`], so captions parse back to the spec that produced them.
//! Rasterization is 4x supersampled so sub-pixel motion changes pixel values
//! smoothly.

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Frame, VideoClip};

pub const DEFAULT_SIZE_FRAC: f32 = 0.3;
pub const DEFAULT_FPS: f32 = 8.0;
/// Frame interval between the two scene images of an evaluation pair.
pub const DEFAULT_SCENE_INTERVAL: usize = 64;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 6] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
        ShapeColor::Magenta,
        ShapeColor::Cyan,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
            ShapeColor::Magenta => "magenta",
            ShapeColor::Cyan => "cyan",
        }
    }

    /// RGB in [-1, 1].
    pub fn rgb(self) -> [f32; 3] {
        match self {
            ShapeColor::Red => [1.0, -1.0, -1.0],
            ShapeColor::Green => [-1.0, 1.0, -1.0],
            ShapeColor::Blue => [-1.0, -1.0, 1.0],
            ShapeColor::Yellow => [1.0, 1.0, -1.0],
            ShapeColor::Magenta => [1.0, -1.0, 1.0],
            ShapeColor::Cyan => [-1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BgColor {
    White,
    Black,
    Gray,
    Navy,
}

impl BgColor {
    pub const ALL: [BgColor; 4] = [BgColor::White, BgColor::Black, BgColor::Gray, BgColor::Navy];

    pub fn word(self) -> &'static str {
        match self {
            BgColor::White => "white",
            BgColor::Black => "black",
            BgColor::Gray => "gray",
            BgColor::Navy => "navy",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            BgColor::White => [1.0, 1.0, 1.0],
            BgColor::Black => [-1.0, -1.0, -1.0],
            BgColor::Gray => [0.0, 0.0, 0.0],
            BgColor::Navy => [-1.0, -1.0, -0.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    Static,
    LeftToRight,
    TopToBottom,
    Grow,
    Shrink,
}

impl Motion {
    pub const ALL: [Motion; 5] =
        [Motion::Static, Motion::LeftToRight, Motion::TopToBottom, Motion::Grow, Motion::Shrink];

    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Static => "staying still",
            Motion::LeftToRight => "moving left to right",
            Motion::TopToBottom => "moving top to bottom",
            Motion::Grow => "growing",
            Motion::Shrink => "shrinking",
        }
    }
}

/// Parametric description of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: ShapeColor,
    pub bg: BgColor,
    pub motion: Motion,
    /// Shape size as a fraction of the smaller frame dimension, in [0.2, 0.5].
    pub size_frac: f32,
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} on a {} background",
            self.color.word(),
            self.shape.word(),
            self.motion.phrase(),
            self.bg.word()
        )
    }

    fn validate(&self) -> Result<()> {
        if !(0.2..=0.5).contains(&self.size_frac) {
            return Err(Error::InvalidArg(format!(
                "size fraction {} outside [0.2, 0.5]",
                self.size_frac
            )));
        }
        Ok(())
    }
}

/// Every categorical spec combination at the canonical size, in a fixed
/// enumeration order. 3 shapes x 6 colors x 4 backgrounds x 5 motions = 360.
pub fn all_specs() -> Vec<SceneSpec> {
    let mut out = Vec::with_capacity(360);
    for shape in Shape::ALL {
        for color in ShapeColor::ALL {
            for bg in BgColor::ALL {
                for motion in Motion::ALL {
                    out.push(SceneSpec { shape, color, bg, motion, size_frac: DEFAULT_SIZE_FRAC });
                }
            }
        }
    }
    out
}

/// Token vocabulary over all caption words, fixed order.
pub const VOCAB: [&str; 26] = [
    "a", "on", "background", "red", "green", "blue", "yellow", "magenta", "cyan", "circle",
    "square", "triangle", "white", "black", "gray", "navy", "staying", "still", "moving", "left",
    "to", "right", "top", "bottom", "growing", "shrinking",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

/// Maps a caption to vocabulary token ids; any out-of-vocabulary word is an
/// error.
pub fn tokenize(caption: &str) -> Result<Vec<usize>> {
    caption
        .split_whitespace()
        .map(|w| {
            VOCAB
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::Vocab(format!("unknown word '{w}'")))
        })
        .collect()
}

/// Parses a caption back to its spec (canonical size). Strict: the full
/// grammar must match.
pub fn parse_caption(caption: &str) -> Result<SceneSpec> {
    let toks: Vec<&str> = caption.split_whitespace().collect();
    let fail = || Error::Vocab(format!("caption does not match the grammar: '{caption}'"));
    if toks.len() < 8 || toks[0] != "a" {
        return Err(fail());
    }
    let color = ShapeColor::ALL
        .into_iter()
        .find(|c| c.word() == toks[1])
        .ok_or_else(fail)?;
    let shape = Shape::ALL.into_iter().find(|s| s.word() == toks[2]).ok_or_else(fail)?;
    let on = toks.iter().position(|t| *t == "on").ok_or_else(fail)?;
    let phrase = toks[3..on].join(" ");
    let motion = Motion::ALL
        .into_iter()
        .find(|m| m.phrase() == phrase)
        .ok_or_else(fail)?;
    if toks.len() != on + 4 || toks[on + 1] != "a" || toks[on + 3] != "background" {
        return Err(fail());
    }
    let bg = BgColor::ALL
        .into_iter()
        .find(|b| b.word() == toks[on + 2])
        .ok_or_else(fail)?;
    Ok(SceneSpec { shape, color, bg, motion, size_frac: DEFAULT_SIZE_FRAC })
}

/// Shape placement at time parameter `tau` in [0, 1]: center and radius in
/// pixel coordinates.
fn placement(spec: &SceneSpec, tau: f32, h: usize, w: usize) -> (f32, f32, f32) {
    let (hf, wf) = (h as f32, w as f32);
    let r_max = spec.size_frac * hf.min(wf) / 2.0;
    let margin = r_max + 0.5;
    match spec.motion {
        Motion::Static => (wf / 2.0, hf / 2.0, r_max),
        Motion::LeftToRight => (margin + tau * (wf - 2.0 * margin), hf / 2.0, r_max),
        Motion::TopToBottom => (wf / 2.0, margin + tau * (hf - 2.0 * margin), r_max),
        Motion::Grow => (wf / 2.0, hf / 2.0, (0.5 + 0.5 * tau) * r_max),
        Motion::Shrink => (wf / 2.0, hf / 2.0, (1.0 - 0.5 * tau) * r_max),
    }
}

fn inside(shape: Shape, x: f32, y: f32, cx: f32, cy: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => {
            let (dx, dy) = (x - cx, y - cy);
            dx * dx + dy * dy <= r * r
        }
        Shape::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
        Shape::Triangle => {
            // equilateral, apex up, inscribed in the radius-r circle
            let ax = cx;
            let ay = cy - r;
            let bx = cx + 0.866_025_4 * r;
            let by = cy + 0.5 * r;
            let tx = cx - 0.866_025_4 * r;
            let ty = cy + 0.5 * r;
            let e1 = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            let e2 = (tx - bx) * (y - by) - (ty - by) * (x - bx);
            let e3 = (ax - tx) * (y - ty) - (ay - ty) * (x - tx);
            (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
        }
    }
}

/// Rasterizes one frame at time parameter `tau` with 4x supersampling.
pub fn render_frame(spec: &SceneSpec, tau: f32, h: usize, w: usize) -> Result<Frame> {
    spec.validate()?;
    let (cx, cy, r) = placement(spec, tau, h, w);
    let halo = r + 0.5;
    if cx - halo < 0.0 || cx + halo > w as f32 || cy - halo < 0.0 || cy + halo > h as f32 {
        return Err(Error::InvalidArg("shape trajectory exits the frame".into()));
    }
    let fg = spec.color.rgb();
    let bg = spec.bg.rgb();
    let mut frame = Array3::zeros((3, h, w));
    let inv = 1.0 / SUPERSAMPLE as f32;
    for py in 0..h {
        for px in 0..w {
            let mut hits = 0u32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f32 + (sx as f32 + 0.5) * inv;
                    let y = py as f32 + (sy as f32 + 0.5) * inv;
                    if inside(spec.shape, x, y, cx, cy, r) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for ch in 0..3 {
                frame[[ch, py, px]] = bg[ch] + cov * (fg[ch] - bg[ch]);
            }
        }
    }
    Ok(frame)
}

/// Deterministic rasterization of the spec's trajectory over `n` frames.
pub fn render_clip(spec: &SceneSpec, n: usize, h: usize, w: usize) -> Result<VideoClip> {
    if n == 0 {
        return Err(Error::InvalidArg("clip needs at least one frame".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidArg(format!("frame dims must be >= 8, got {h}x{w}")));
    }
    let mut frames = Array4::zeros((n, 3, h, w));
    for i in 0..n {
        let tau = if n == 1 { 0.5 } else { i as f32 / (n - 1) as f32 };
        let frame = render_frame(spec, tau, h, w)?;
        frames.index_axis_mut(ndarray::Axis(0), i).assign(&frame);
    }
    VideoClip::new(frames, DEFAULT_FPS, spec.caption())
}

fn uniform_spec<R: Rng>(rng: &mut R) -> SceneSpec {
    SceneSpec {
        shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
        color: ShapeColor::ALL[rng.random_range(0..ShapeColor::ALL.len())],
        bg: BgColor::ALL[rng.random_range(0..BgColor::ALL.len())],
        motion: Motion::ALL[rng.random_range(0..Motion::ALL.len())],
        size_frac: DEFAULT_SIZE_FRAC,
    }
}

/// Draws `count` specs uniformly over the vocabulary (without replacement as
/// long as the vocabulary lasts) and renders them.
pub fn make_dataset(count: usize, seed: u64, n: usize, h: usize, w: usize) -> Result<Vec<VideoClip>> {
    if count == 0 {
        return Err(Error::InvalidArg("dataset count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = all_specs();
    specs.shuffle(&mut rng);
    let mut chosen: Vec<SceneSpec> = specs.iter().take(count).copied().collect();
    while chosen.len() < count {
        chosen.push(uniform_spec(&mut rng));
    }
    chosen.iter().map(|s| render_clip(s, n, h, w)).collect()
}

/// Two frames of one scene separated by a large interval, plus the caption.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub s1: Frame,
    pub s2: Frame,
    pub caption: String,
}

/// Renders an `interval`-frame clip from one uniformly drawn spec and returns
/// its first and last frames as the scene pair.
pub fn make_scene_pair(seed: u64, interval: usize, h: usize, w: usize) -> Result<ScenePair> {
    if interval < 2 {
        return Err(Error::InvalidArg("scene-pair interval must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = uniform_spec(&mut rng);
    let clip = render_clip(&spec, interval, h, w)?;
    Ok(ScenePair {
        s1: clip.frame_owned(0),
        s2: clip.frame_owned(interval - 1),
        caption: spec.caption(),
    })
}
