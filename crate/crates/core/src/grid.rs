//! Pixel- and latent-space value grids.
//!
//! A [`LatentGrid`] is a rank-4 grid of `frames x channels x height x width`
//! values. Clean codec outputs live in `[-1, 1]`; noised states are unbounded.

use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{Error, Result};

/// Single frame in pixel space, `channels x height x width`.
pub type Frame = Array3<f32>;

/// Rank-4 value grid `n x c x h x w`. Houses clean latents, noised latents
/// and noise samples alike.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Array4<f32>,
}

impl LatentGrid {
    pub fn new(values: Array4<f32>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArg("latent grid contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { values: Array4::zeros((n, c, h, w)) }
    }

    /// (frames, channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.values.dim();
        (d.0, d.1, d.2, d.3)
    }

    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.values.dim() == other.values.dim()
    }
}

/// An ordered sequence of frames in pixel space with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `n x 3 x h x w`, values in `[-1, 1]`.
    pub frames: Array4<f32>,
    /// Nominal playback rate.
    pub fps: f32,
    /// Caption over the controlled vocabulary (may be empty for decoded clips).
    pub caption: String,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>, fps: f32, caption: impl Into<String>) -> Result<Self> {
        if frames.dim().0 == 0 {
            return Err(Error::InvalidArg("clip must have at least one frame".into()));
        }
        if frames.dim().1 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "clip must have 3 channels, got {}",
                frames.dim().1
            )));
        }
        if !frames.iter().all(|v| v.is_finite() && (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)) {
            return Err(Error::InvalidArg("clip values must lie in [-1, 1]".into()));
        }
        Ok(Self { frames, fps, caption: caption.into() })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (height, width)
    pub fn dims(&self) -> (usize, usize) {
        (self.frames.dim().2, self.frames.dim().3)
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(ndarray::Axis(0), i)
    }

    pub fn frame_owned(&self, i: usize) -> Frame {
        self.frame(i).to_owned()
    }
}
