//! Hand-rolled neural-network layers with explicit backward passes.
//!
//! Everything is generic over the element type so the same code path runs in
//! f32 for training and in f64 for finite-difference gradient checks. No
//! hidden global state: parameters go in, activations and gradients come out.

pub mod adam;
pub mod attention;
pub mod embed;
pub mod layers;
pub mod unet;

pub use adam::{Optimizer, OptimizerKind};
pub use unet::{
    embed_caption, loss_and_gradients, predict_noise, ArchConfig, BatchItem, CaptionEmbedding,
    DenoiserParams, LossSupport,
};

use ndarray::NdFloat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar element of every tensor in the network.
pub trait El: NdFloat + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl El for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl El for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Standard-normal draw converted to the element type. Sampling happens in
/// f64 so f32 and f64 instantiations see the same generator stream.
pub fn randn<F: El, R: Rng>(rng: &mut R) -> F {
    let x: f64 = StandardNormal.sample(rng);
    F::from_f64(x)
}
