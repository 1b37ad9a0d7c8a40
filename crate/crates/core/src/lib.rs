//! Masked-frame conditional video diffusion at desk scale.
//!
//! The model corrupts a latent video grid with a fixed variance schedule and
//! trains a compact spatio-temporal network to predict the corrupting noise,
//! conditioned on a per-frame visibility mask, the masked clean latent, and a
//! caption. Choosing the mask pattern at inference time yields scene
//! transitions (first + last frame visible), autoregressive prediction
//! (leading overlap visible), and image animation (first frame visible).
//!
//! The crate also ships the procedural synthetic-video dataset the model
//! trains on, three baseline transition generators, transition-quality
//! metrics over pluggable frame embedders, and the file formats and CLI that
//! tie it all together.

pub mod baselines;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
