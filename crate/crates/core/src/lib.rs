//! Unsupervised diffusion-based brightness enhancement for underwater images.
//!
//! Raw images are split into synthetic low/high brightness pairs
//! ([`preprocess`]); a conditional U-Net ([`denoiser`]) learns to generate the
//! bright image from noise given the dark image's color and SNR maps and a
//! target brightness; [`diffusion`] holds the schedule and the DDIM sampler.
//! [`losses`] and [`metrics`] cover training objectives and evaluation, and
//! [`pipeline`] ties it together with checkpoints and a CLI.

pub mod cli;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod perceptual;
pub mod pipeline;
pub mod plot;
pub mod preprocess;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::RawImage;
