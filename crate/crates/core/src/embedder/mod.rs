//! Disentangled emotion embedder: a visual projection and an audio
//! transformer stack, residual cross-attention fusion of audio onto visual,
//! attention-weighted Gaussian aggregation over frames, and InfoNCE training.

mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{info_nce, info_nce_var};
pub use model::{EmbedderModel, EmotionPrior, Encoded, PriorVars};
pub use train::{batch_loss, train_embedder, EmbedderTraining};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Width of the emotion embedding.
    pub d_s: usize,
    pub audio_layers: usize,
    pub fusion_layers: usize,
    pub ffn_hidden: usize,
    /// Initial value of each fusion layer's learnable residual scale.
    pub lambda_fuse_init: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub lr: f64,
    pub p_audio_drop: f64,
    pub p_visual_drop: f64,
    /// Train on `mu` instead of a reparameterised sample.
    pub deterministic_mu: bool,
    /// Anchors in the fixed held batch used for before/after loss.
    pub eval_pairs: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            d_s: 32,
            audio_layers: 2,
            fusion_layers: 2,
            ffn_hidden: 64,
            lambda_fuse_init: 0.5,
            tau: 0.1,
            steps: 500,
            batch_size: 16,
            negatives: 8,
            lr: 2e-3,
            p_audio_drop: 0.2,
            p_visual_drop: 0.2,
            deterministic_mu: false,
            eval_pairs: 64,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.ffn_hidden == 0 || self.batch_size == 0 || self.negatives == 0 || self.eval_pairs == 0 {
            return Err(Error::config("embedder sizes must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("embedder.tau must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("embedder.lr must be positive"));
        }
        if !self.lambda_fuse_init.is_finite() {
            return Err(Error::config("embedder.lambda_fuse_init must be finite"));
        }
        for p in [self.p_audio_drop, self.p_visual_drop] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config("dropout probabilities must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}
