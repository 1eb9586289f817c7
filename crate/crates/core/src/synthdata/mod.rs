//! Synthetic paired audio/visual corpus with known identity, emotion and
//! intensity labels, plus the contrastive pair sampler and the two dropout
//! regimes used in training.

mod corpus;
mod dropout;
mod io;
mod pairs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use corpus::{generate_corpus, identity_references, intensity_scale};
pub use dropout::{condition_dropout, draw_condition_drops, modality_dropout, DropFlags, CONDITION_DROP_RATE};
pub use io::{export_corpus, import_corpus, IndexEntry, CLIP_MAGIC};
pub use pairs::{sample_pairs, PairBatch};

pub const EMOTION_NAMES: [&str; 4] = ["neutral", "happy", "surprised", "angry"];

pub fn emotion_name(e: usize) -> String {
    EMOTION_NAMES.get(e).map(|s| s.to_string()).unwrap_or_else(|| format!("emotion{e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Visual,
}

/// Per-frame features of one modality of one clip (`N × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub modality: Modality,
    pub dropped: bool,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, modality: Modality) -> Self {
        FeatureSequence { frames, modality, dropped: false }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zeroes every entry and marks the sequence as dropped.
    pub fn drop_out(&mut self) {
        self.frames.data_mut().fill(0.0);
        self.dropped = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: u32,
    /// Shared by the two segments of one video when segment positives are on;
    /// otherwise equal to `clip_id`.
    pub video_id: u32,
    pub identity: u32,
    pub emotion: u32,
    pub intensity: u32,
    pub visual: FeatureSequence,
    pub audio: FeatureSequence,
    /// Ground-truth latent, `F × C × H × W`.
    pub latent_video: Tensor,
}

impl ClipRecord {
    pub fn frames(&self) -> usize {
        self.visual.len()
    }

    /// The latent flattened to `F × (C·H·W)`.
    pub fn latent_matrix(&self) -> Tensor {
        let f = self.latent_video.shape()[0];
        let p = self.latent_video.numel() / f;
        self.latent_video.clone().reshape(vec![f, p]).expect("latent reshape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Seed for corpus generation.
    pub seed: u64,
    pub identities: usize,
    pub emotions: usize,
    pub intensities: usize,
    pub clips_per_cell: usize,
    /// Frames per clip (visual, audio and latent share this count).
    pub frames: usize,
    pub d_raw: usize,
    /// Ratio of per-coordinate signal scale to noise standard deviation.
    pub visual_snr: f64,
    pub audio_snr: f64,
    pub identity_scale: f64,
    /// Stationary standard deviation of the visual drift.
    pub drift_scale: f64,
    /// Frame-to-frame autocorrelation of the visual drift, in `[0, 1)`.
    pub drift_correlation: f64,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_identity_scale: f64,
    pub latent_emotion_scale: f64,
    pub latent_mouth_scale: f64,
    /// Emit every video as two half-overlapping segments that serve as each
    /// other's contrastive positive.
    pub segment_positives: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            identities: 6,
            emotions: 4,
            intensities: 3,
            clips_per_cell: 4,
            frames: 16,
            d_raw: 24,
            visual_snr: 2.0,
            audio_snr: 0.4,
            identity_scale: 1.0,
            drift_scale: 0.3,
            drift_correlation: 0.9,
            latent_channels: 2,
            latent_height: 4,
            latent_width: 4,
            latent_identity_scale: 0.5,
            latent_emotion_scale: 0.5,
            latent_mouth_scale: 0.3,
            segment_positives: false,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("identities", self.identities),
            ("emotions", self.emotions),
            ("intensities", self.intensities),
            ("clips_per_cell", self.clips_per_cell),
            ("frames", self.frames),
            ("d_raw", self.d_raw),
            ("latent_channels", self.latent_channels),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("data.{name} must be positive")));
            }
        }
        if !(self.visual_snr > 0.0 && self.audio_snr > 0.0) {
            return Err(Error::config("SNRs must be positive"));
        }
        if !(self.drift_scale >= 0.0) || !(0.0..1.0).contains(&self.drift_correlation) {
            return Err(Error::config("drift_scale must be non-negative and drift_correlation in [0, 1)"));
        }
        if self.audio_snr >= self.visual_snr {
            return Err(Error::config("audio_snr must be below visual_snr"));
        }
        Ok(())
    }

    pub fn latent_frame_dim(&self) -> usize {
        self.latent_channels * self.latent_height * self.latent_width
    }

    pub fn expected_clips(&self) -> usize {
        let per_video = if self.segment_positives { 2 } else { 1 };
        self.identities * self.emotions * self.intensities * self.clips_per_cell * per_video
    }
}
