//! Healthy/disease disentangling segmentation for 3-D PET-like volumes.
//!
//! A shared encoder splits every input into a healthy latent and a disease
//! latent. The disease latent drives a lesion segmentation decoder; the
//! healthy latent drives an image decoder whose normalization layers are
//! modulated by the predicted lesion mask, so decoding with an empty mask
//! yields a pseudo-healthy image. A Wasserstein critic keeps healthy latents
//! of diseased inputs indistinguishable from those of healthy inputs.

pub mod cli;
pub mod critic;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
