//! Emotion-conditioned toy video diffusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, tape-based reverse-mode differentiation, gradient checks
//! * [`synthdata`]: seeded synthetic audio/visual corpus, contrastive pairs, dropout regimes
//! * [`embedder`]: cross-modal emotion embedder with a Gaussian prior, trained by InfoNCE
//! * [`bank`]: learnable emotion codebook, nearest-code retrieval, VQ loss, bank attention
//! * [`diffusion`]: conditional denoiser, emotion discriminator, compositional loss, sampler
//! * [`eval`]: clustering strength, interpolation, 2-D projection, emotion accuracy
//! * [`cli`]: the `emobank` command-line tool

pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
