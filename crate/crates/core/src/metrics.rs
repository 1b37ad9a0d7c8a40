//! Transition-quality metrics over pluggable frame embedders, plus a
//! Gaussian Fréchet distance over embedding sets.
//!
//! Three scores mirror the three transition criteria: `sim_frames` (temporal
//! coherence, mean cosine of consecutive frames), `sim_scenes` (semantic
//! similarity to the two scene images), and `sim_text` (alignment with the
//! caption through a rendered anchor frame). Embeddings are unit-normalized;
//! an all-zero frame maps to a fixed canonical unit vector.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView3};

use crate::codec::{encode, Codec};
use crate::data::{parse_caption, render_frame, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::grid::{Frame, VideoClip};

#[derive(Debug, Clone)]
pub enum Embedder {
    /// Raw pixels, flattened and unit-normalized. Exactly linear.
    Flatten,
    /// Mean-centered 4x4 average-pooled grayscale cells plus per-channel
    /// mean and standard deviation. Cheap and deterministic; every component
    /// is positively homogeneous, so positive rescaling cancels.
    Pooled,
    /// Flattened single-frame codec latent.
    CodecLatent(Codec),
}

impl Embedder {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Embedder::Flatten => "flatten",
            Embedder::Pooled => "pooled",
            Embedder::CodecLatent(_) => "codec",
        }
    }

    /// Unit-normalized embedding of one frame.
    pub fn embed(&self, frame: &ArrayView3<'_, f32>) -> Result<Array1<f64>> {
        let raw = match self {
            Embedder::Flatten => frame.iter().map(|v| *v as f64).collect::<Vec<f64>>(),
            Embedder::Pooled => pooled_features(frame),
            Embedder::CodecLatent(codec) => {
                let (c, h, w) = frame.dim();
                if c != 3 {
                    return Err(Error::ShapeMismatch("frames must have 3 channels".into()));
                }
                let mut frames = ndarray::Array4::zeros((1, 3, h, w));
                frames.index_axis_mut(ndarray::Axis(0), 0).assign(frame);
                let clip = VideoClip::new(frames, DEFAULT_FPS, "")?;
                let z = encode(codec, &clip)?;
                z.values.iter().map(|v| *v as f64).collect()
            }
        };
        Ok(normalize_or_canonical(Array1::from_vec(raw)))
    }
}

fn pooled_features(frame: &ArrayView3<'_, f32>) -> Vec<f64> {
    let (c, h, w) = frame.dim();
    let grid = 4usize;
    let mut cells = vec![0.0f64; grid * grid];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..h {
        for x in 0..w {
            let gy = (y * grid / h).min(grid - 1);
            let gx = (x * grid / w).min(grid - 1);
            let gray: f64 = (0..c).map(|ch| frame[[ch, y, x]] as f64).sum::<f64>() / c as f64;
            cells[gy * grid + gx] += gray;
            counts[gy * grid + gx] += 1;
        }
    }
    for (cell, count) in cells.iter_mut().zip(&counts) {
        *cell /= (*count).max(1) as f64;
    }
    let cell_mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let mut feats: Vec<f64> = cells.iter().map(|v| v - cell_mean).collect();
    for ch in 0..c {
        let lane = frame.index_axis(ndarray::Axis(0), ch);
        let m = lane.iter().map(|v| *v as f64).sum::<f64>() / lane.len() as f64;
        feats.push(m);
    }
    for ch in 0..c {
        let lane = frame.index_axis(ndarray::Axis(0), ch);
        let m = lane.iter().map(|v| *v as f64).sum::<f64>() / lane.len() as f64;
        let var = lane.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / lane.len() as f64;
        feats.push(var.sqrt());
    }
    feats
}

fn normalize_or_canonical(mut v: Array1<f64>) -> Array1<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut canon = Array1::zeros(v.len());
        canon[0] = 1.0;
        return canon;
    }
    v /= norm;
    v
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Per-frame embeddings of a clip.
pub fn embed_clip(clip: &VideoClip, emb: &Embedder) -> Result<Vec<Array1<f64>>> {
    (0..clip.len()).map(|i| emb.embed(&clip.frame(i))).collect()
}

/// Scalar score together with its per-frame trace and the trace minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub scalar: f64,
    pub trace: Vec<f64>,
    pub min: f64,
}

impl SimTrace {
    fn from_trace(trace: Vec<f64>) -> Self {
        let scalar = trace.iter().sum::<f64>() / trace.len() as f64;
        let min = trace.iter().copied().fold(f64::INFINITY, f64::min);
        Self { scalar, trace, min }
    }
}

/// Temporal coherence: mean cosine similarity over consecutive frame pairs.
pub fn sim_frames(clip: &VideoClip, emb: &Embedder) -> Result<SimTrace> {
    if clip.len() < 2 {
        return Err(Error::InvalidArg("sim_frames needs at least 2 frames".into()));
    }
    let embs = embed_clip(clip, emb)?;
    let trace: Vec<f64> = embs.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
    Ok(SimTrace::from_trace(trace))
}

/// How per-frame scene similarities are aggregated across the two scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneAgg {
    /// `max(cos to S1, cos to S2)` per frame: frames should resemble either
    /// source image.
    MaxOverScenes,
    /// Mean of the two cosines per frame.
    MeanOverScenes,
}

/// Semantic similarity of each frame to the given scene images.
pub fn sim_scenes(
    clip: &VideoClip,
    s1: &Frame,
    s2: &Frame,
    emb: &Embedder,
    agg: SceneAgg,
) -> Result<SimTrace> {
    let e1 = emb.embed(&s1.view())?;
    let e2 = emb.embed(&s2.view())?;
    let embs = embed_clip(clip, emb)?;
    let trace: Vec<f64> = embs
        .iter()
        .map(|e| {
            let (a, b) = (cosine(e, &e1), cosine(e, &e2));
            match agg {
                SceneAgg::MaxOverScenes => a.max(b),
                SceneAgg::MeanOverScenes => 0.5 * (a + b),
            }
        })
        .collect();
    Ok(SimTrace::from_trace(trace))
}

/// Renders a caption's scene to canonical anchor frames for text-alignment
/// scoring. The anchor samples the described trajectory at a few fixed time
/// parameters so motion words are reflected in the embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextAnchor;

impl TextAnchor {
    const TAUS: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

    /// Canonical static frame of the caption's scene at time parameter `tau`.
    pub fn anchor_frame(&self, caption: &str, tau: f32, h: usize, w: usize) -> Result<Frame> {
        let spec = parse_caption(caption)?;
        render_frame(&spec, tau, h, w)
    }

    /// Mean embedding of the anchor frames, unit-normalized.
    pub fn anchor_embedding(
        &self,
        caption: &str,
        h: usize,
        w: usize,
        emb: &Embedder,
    ) -> Result<Array1<f64>> {
        let mut mean: Option<Array1<f64>> = None;
        for tau in Self::TAUS {
            let frame = self.anchor_frame(caption, tau, h, w)?;
            let e = emb.embed(&frame.view())?;
            mean = Some(match mean {
                Some(m) => m + &e,
                None => e,
            });
        }
        Ok(normalize_or_canonical(mean.unwrap() / Self::TAUS.len() as f64))
    }
}

/// Video-text alignment: cosine between the clip's mean frame embedding and
/// the caption's anchor embedding. Errors on captions outside the controlled
/// vocabulary.
pub fn sim_text(
    clip: &VideoClip,
    caption: &str,
    emb: &Embedder,
    anchor: &TextAnchor,
) -> Result<f64> {
    let (h, w) = clip.dims();
    let anchor_emb = anchor.anchor_embedding(caption, h, w, emb)?;
    let embs = embed_clip(clip, emb)?;
    let mut mean = Array1::zeros(embs[0].len());
    for e in &embs {
        mean += e;
    }
    mean /= embs.len() as f64;
    let mean = normalize_or_canonical(mean);
    Ok(cosine(&mean, &anchor_emb))
}

fn mean_and_cov(set: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = set.dim();
    let mean = set.mean_axis(ndarray::Axis(0)).unwrap();
    let mut cov = DMatrix::zeros(d, d);
    for row in set.rows() {
        let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at
/// zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussian fits of two embedding sets
/// (rows are samples): `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(set_a: &Array2<f64>, set_b: &Array2<f64>) -> Result<f64> {
    let (na, da) = set_a.dim();
    let (nb, db) = set_b.dim();
    if da != db {
        return Err(Error::ShapeMismatch(format!("embedding dims differ: {da} vs {db}")));
    }
    if na < 2 || nb < 2 {
        return Err(Error::InvalidArg("each set needs at least 2 samples".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(set_a);
    let (mu_b, cov_b) = mean_and_cov(set_b);
    let mean_term: f64 = mu_a.iter().zip(mu_b.iter()).map(|(a, b)| (a - b).powi(2)).sum();

    let a_half = sym_sqrt(&cov_a);
    let inner = &a_half * &cov_b * &a_half;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d2 = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// The three transition scores plus their traces.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub sim_text: f64,
    pub sim_scenes: f64,
    pub sim_frames: f64,
    pub sim_frames_min: f64,
    pub scenes_trace: Vec<f64>,
    pub frames_trace: Vec<f64>,
    pub embedder: String,
    pub caption: String,
}

/// Bundles the three metrics into one report.
pub fn evaluate_transition(
    clip: &VideoClip,
    s1: &Frame,
    s2: &Frame,
    caption: &str,
    emb: &Embedder,
) -> Result<MetricsReport> {
    let frames = sim_frames(clip, emb)?;
    let scenes = sim_scenes(clip, s1, s2, emb, SceneAgg::MaxOverScenes)?;
    let text = sim_text(clip, caption, emb, &TextAnchor)?;
    Ok(MetricsReport {
        sim_text: text,
        sim_scenes: scenes.scalar,
        sim_frames: frames.scalar,
        sim_frames_min: frames.min,
        scenes_trace: scenes.trace,
        frames_trace: frames.trace,
        embedder: emb.kind_name().to_string(),
        caption: caption.to_string(),
    })
}
