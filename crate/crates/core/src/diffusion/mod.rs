//! Toy conditional diffusion over synthetic video latents: a
//! variance-preserving noise schedule, an ε-predicting denoiser with audio
//! cross-attention, identity conditioning and emotion injection, a latent
//! emotion discriminator, the compositional training loss and a DDIM sampler.

mod loss;
mod model;
mod sample;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::bank::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::DropFlags;

pub use loss::{cls_loss, total_loss, LossParts, SampleDraw, TrainSample};
pub use model::{null_conditions, timestep_embedding, DiffusionModel, EmotionDiscriminator, Forward, ModelDims, NullSlot};
pub use sample::{emotion_prompts, sample, sample_from, sample_guided};
pub use schedule::{add_noise, NoiseSchedule, NoisyLatent};
pub use train::{
    identity_embeddings, prepare_samples, quartile_accuracy, speech_features, train_diffusion, train_on_samples, DiffusionTraining,
    LossRecord,
};

/// The denoiser's conditioning bundle. Flagged slots are replaced by the
/// model's learned null embeddings where they are used.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    /// `1 × d_s`.
    pub identity_embed: Tensor,
    /// `N × d_s`.
    pub audio_seq: Tensor,
    pub emotion: ConditionEmbedding,
    pub drop: DropFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub sampler_steps: usize,
    /// Log signal-to-noise ratio at `t = 0`.
    pub logsnr_max: f64,
    /// Log signal-to-noise ratio at `t = T`.
    pub logsnr_min: f64,
    pub d_model: usize,
    pub temb_dim: usize,
    pub ffn_hidden: usize,
    pub disc_hidden: usize,
    /// Weight of the emotion classification loss.
    pub lambda_cls: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Apply the four 5% condition-drop events during training.
    pub condition_dropout: bool,
    /// Classifier-free guidance scale used by `sample`; 1 disables guidance.
    pub guidance_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 50,
            sampler_steps: 25,
            logsnr_max: 8.0,
            logsnr_min: -12.0,
            d_model: 32,
            temb_dim: 16,
            ffn_hidden: 64,
            disc_hidden: 32,
            lambda_cls: 0.1,
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            condition_dropout: true,
            guidance_scale: 1.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if [self.d_model, self.temb_dim, self.ffn_hidden, self.disc_hidden, self.batch_size].contains(&0) {
            return Err(Error::config("diffusion sizes must be positive"));
        }
        if !(self.lambda_cls >= 0.0) {
            return Err(Error::config("diffusion.lambda_cls must be non-negative"));
        }
        if !(self.lr > 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::config("diffusion.lr must be positive and guidance_scale finite"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.timesteps, self.sampler_steps, self.logsnr_max, self.logsnr_min)
    }
}
