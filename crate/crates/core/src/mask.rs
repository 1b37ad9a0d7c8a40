//! Frame masks and conditional-input assembly.
//!
//! A [`FrameMask`] marks which frames are visible conditioning frames (1)
//! versus frames to generate (0). The conditional input to the denoiser is
//! the channel concatenation `[z_t ; mask ; z0_masked]`, where the mask bit
//! of each frame is broadcast over a full `c x h x w` slab.

use ndarray::{Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    bits: Vec<u8>,
}

impl FrameMask {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArg("mask must have at least one frame".into()));
        }
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::InvalidArg("mask bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_visible(&self, frame: usize) -> bool {
        self.bits[frame] == 1
    }

    /// Number of visible conditioning frames.
    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|b| *b as usize).sum()
    }

    /// Indices of the visible frames, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| (*b == 1).then_some(i))
            .collect()
    }
}

/// Draws each bit independently as Bernoulli(p).
pub fn sample_mask<R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<FrameMask> {
    if n == 0 {
        return Err(Error::InvalidArg("mask length must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArg(format!("mask rate must lie in [0, 1], got {p}")));
    }
    let bits = (0..n).map(|_| u8::from(rng.random_bool(p))).collect();
    Ok(FrameMask { bits })
}

/// Masked latent code: frame i is kept when `bits[i] = 1` and zeroed
/// otherwise. Exact, no tolerance.
pub fn apply_mask(z0: &LatentGrid, mask: &FrameMask) -> Result<LatentGrid> {
    if mask.len() != z0.frames() {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} vs {} frames",
            mask.len(),
            z0.frames()
        )));
    }
    let mut values = z0.values.clone();
    for (i, bit) in mask.bits.iter().enumerate() {
        if *bit == 0 {
            values.index_axis_mut(Axis(0), i).fill(0.0);
        }
    }
    Ok(LatentGrid { values })
}

/// Conditional denoiser input of shape `n x (3c) x h x w` with channel
/// blocks ordered exactly: noised latent, broadcast mask, masked clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalInput {
    pub values: Array4<f32>,
}

impl ConditionalInput {
    /// (frames, 3 * latent channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.values.dim();
        (d.0, d.1, d.2, d.3)
    }

    /// Latent channel count `c` of the constituent blocks.
    pub fn latent_channels(&self) -> usize {
        self.values.dim().1 / 3
    }
}

/// Concatenates `[z_t ; mask ; z0_masked]` along channels, broadcasting each
/// mask bit over a `c x h x w` slab of ones or zeros.
pub fn assemble_input(
    z_t: &LatentGrid,
    mask: &FrameMask,
    z0_masked: &LatentGrid,
) -> Result<ConditionalInput> {
    if !z_t.same_shape(z0_masked) {
        return Err(Error::ShapeMismatch(format!(
            "z_t {:?} vs z0_masked {:?}",
            z_t.shape(),
            z0_masked.shape()
        )));
    }
    let (n, c, h, w) = z_t.shape();
    if mask.len() != n {
        return Err(Error::ShapeMismatch(format!("mask length {} vs {n} frames", mask.len())));
    }
    for (i, bit) in mask.bits.iter().enumerate() {
        if *bit == 0
            && z0_masked
                .values
                .index_axis(Axis(0), i)
                .iter()
                .any(|v| *v != 0.0)
        {
            return Err(Error::InvalidArg(format!(
                "z0_masked has nonzero values on masked-out frame {i}"
            )));
        }
    }

    let mut values = Array4::zeros((n, 3 * c, h, w));
    values.slice_mut(ndarray::s![.., 0..c, .., ..]).assign(&z_t.values);
    for (i, bit) in mask.bits.iter().enumerate() {
        values
            .slice_mut(ndarray::s![i, c..2 * c, .., ..])
            .fill(f32::from(*bit));
    }
    values
        .slice_mut(ndarray::s![.., 2 * c..3 * c, .., ..])
        .assign(&z0_masked.values);
    Ok(ConditionalInput { values })
}

/// `[1, 0, ..., 0, 1]`: first and last frame visible.
pub fn transition_mask(n: usize) -> Result<FrameMask> {
    if n < 3 {
        return Err(Error::InvalidArg(format!(
            "transition needs n >= 3 (no in-between frames at n={n})"
        )));
    }
    let mut bits = vec![0u8; n];
    bits[0] = 1;
    bits[n - 1] = 1;
    Ok(FrameMask { bits })
}

/// `[1]*k + [0]*(n-k)`: k overlap frames at the head of the window.
pub fn prediction_mask(n: usize, k: usize) -> Result<FrameMask> {
    if k == 0 {
        return Err(Error::InvalidArg("overlap must be >= 1".into()));
    }
    if k >= n {
        return Err(Error::InvalidArg(format!(
            "overlap {k} leaves nothing to generate in a {n}-frame window"
        )));
    }
    let mut bits = vec![0u8; n];
    bits[..k].fill(1);
    Ok(FrameMask { bits })
}

/// `[1, 0, ..., 0]`: reference image as the first frame.
pub fn animation_mask(n: usize) -> Result<FrameMask> {
    if n < 2 {
        return Err(Error::InvalidArg(format!("animation needs n >= 2, got {n}")));
    }
    let mut bits = vec![0u8; n];
    bits[0] = 1;
    Ok(FrameMask { bits })
}
