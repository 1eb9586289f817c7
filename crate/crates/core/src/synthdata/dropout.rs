use rand::Rng;

use crate::diffusion::ConditionSet;
use crate::error::{Error, Result};

use super::ClipRecord;

/// Probability of each of the four disjoint condition-drop events
/// (audio, identity image, emotion, everything).
pub const CONDITION_DROP_RATE: f64 = 0.05;

/// Zeroes the audio or visual stream of each clip independently with the
/// given probabilities. A clip never loses both: if both are drawn, the
/// visual stream is kept.
pub fn modality_dropout<R: Rng + ?Sized>(
    mut batch: Vec<ClipRecord>,
    p_audio: f64,
    p_visual: f64,
    rng: &mut R,
) -> Result<Vec<ClipRecord>> {
    for p in [p_audio, p_visual] {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::argument(format!("dropout probability {p} outside [0, 1)")));
        }
    }
    for clip in &mut batch {
        let drop_audio = rng.random::<f64>() < p_audio;
        let drop_visual = rng.random::<f64>() < p_visual;
        if drop_audio {
            clip.audio.drop_out();
        }
        if drop_visual && !drop_audio {
            clip.visual.drop_out();
        }
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub audio: bool,
    pub image: bool,
    pub emotion: bool,
}

impl DropFlags {
    pub const NONE: DropFlags = DropFlags { audio: false, image: false, emotion: false };
    pub const ALL: DropFlags = DropFlags { audio: true, image: true, emotion: true };
}

/// One uniform draw split into the four disjoint 5% events.
pub fn draw_condition_drops<R: Rng + ?Sized>(rng: &mut R) -> DropFlags {
    let u: f64 = rng.random();
    let r = CONDITION_DROP_RATE;
    if u < r {
        DropFlags { audio: true, ..DropFlags::NONE }
    } else if u < 2.0 * r {
        DropFlags { image: true, ..DropFlags::NONE }
    } else if u < 3.0 * r {
        DropFlags { emotion: true, ..DropFlags::NONE }
    } else if u < 4.0 * r {
        DropFlags::ALL
    } else {
        DropFlags::NONE
    }
}

/// Sets the drop flags of a condition bundle. The denoiser substitutes its
/// learned null embedding for every flagged slot.
pub fn condition_dropout<R: Rng + ?Sized>(mut conditions: ConditionSet, rng: &mut R) -> ConditionSet {
    conditions.drop = draw_condition_drops(rng);
    conditions
}
