use rand::Rng;

use crate::error::Result;
use crate::numerics::Tensor;
use crate::rng::{self, normal_vec};

use super::{ClipRecord, CorpusConfig, FeatureSequence, Modality};

const LATENT_CLAMP: f64 = 3.0;

/// Emotion magnitude for an intensity level: evenly spaced up to 1.5.
pub fn intensity_scale(level: usize, levels: usize) -> f64 {
    1.5 * (level + 1) as f64 / levels as f64
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

struct Factors {
    identity_base: Vec<Vec<f64>>,
    visual_emotion: Vec<Vec<f64>>,
    audio_emotion: Vec<Vec<f64>>,
    latent_identity: Vec<Vec<f64>>,
    latent_emotion: Vec<Vec<f64>>,
    latent_mouth: Vec<f64>,
    mouth_readout: Vec<f64>,
}

impl Factors {
    fn draw<R: Rng>(cfg: &CorpusConfig, rng: &mut R) -> Self {
        let d = cfg.d_raw;
        let p = cfg.latent_frame_dim();
        let identity_base = (0..cfg.identities)
            .map(|_| scaled(normal_vec(rng, d), cfg.identity_scale))
            .collect();
        let visual_emotion = (0..cfg.emotions).map(|_| normal_vec(rng, d)).collect();
        let audio_emotion = (0..cfg.emotions).map(|_| normal_vec(rng, d)).collect();
        let latent_identity = (0..cfg.identities)
            .map(|_| scaled(normal_vec(rng, p), cfg.latent_identity_scale))
            .collect();
        let latent_emotion = (0..cfg.emotions)
            .map(|_| scaled(normal_vec(rng, p), cfg.latent_emotion_scale))
            .collect();
        let latent_mouth = scaled(normal_vec(rng, p), cfg.latent_mouth_scale);
        let u = normal_vec(rng, d);
        let n = crate::numerics::norm(&u);
        let mouth_readout = scaled(u, 1.0 / n);
        Factors {
            identity_base,
            visual_emotion,
            audio_emotion,
            latent_identity,
            latent_emotion,
            latent_mouth,
            mouth_readout,
        }
    }
}

/// Generates the labelled corpus. Output is a pure function of
/// `(config, seed)`.
///
/// Visual frames carry identity, emotion, a slow per-clip drift and noise;
/// the drift is a stationary first-order autoregressive process, so part of
/// it survives averaging over a clip;
/// audio frames carry a separate, noisier emotion direction only. The latent
/// is rendered from identity and emotion patterns plus a per-frame mouth
/// component driven by the audio frame.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let mut rng = rng::seeded(seed);
    let f = Factors::draw(cfg, &mut rng);
    let (d, p) = (cfg.d_raw, cfg.latent_frame_dim());
    let n = cfg.frames;
    let total = if cfg.segment_positives { n + n / 2 } else { n };
    let (sv, sa) = (1.0 / cfg.visual_snr, 1.0 / cfg.audio_snr);

    let mut clips = Vec::with_capacity(cfg.expected_clips());
    let mut video_id = 0u32;
    for identity in 0..cfg.identities {
        for emotion in 0..cfg.emotions {
            for level in 0..cfg.intensities {
                let m = intensity_scale(level, cfg.intensities);
                for _ in 0..cfg.clips_per_cell {
                    let rho = cfg.drift_correlation;
                    let innovation = cfg.drift_scale * (1.0 - rho * rho).sqrt();
                    let mut drift = scaled(normal_vec(&mut rng, d), cfg.drift_scale);
                    let mut visual = Vec::with_capacity(total * d);
                    let mut audio = Vec::with_capacity(total * d);
                    let mut latent = Vec::with_capacity(total * p);
                    for t in 0..total {
                        if t > 0 {
                            for x in drift.iter_mut() {
                                *x = rho * *x + innovation * rng::normal(&mut rng);
                            }
                        }
                        for j in 0..d {
                            visual.push(
                                f.identity_base[identity][j]
                                    + m * f.visual_emotion[emotion][j]
                                    + drift[j]
                                    + sv * rng::normal(&mut rng),
                            );
                        }
                        let frame_start = audio.len();
                        for j in 0..d {
                            audio.push(m * f.audio_emotion[emotion][j] + sa * rng::normal(&mut rng));
                        }
                        let a = &audio[frame_start..];
                        let mouth = (0.5 * a.iter().zip(&f.mouth_readout).map(|(x, u)| x * u).sum::<f64>()).tanh();
                        for j in 0..p {
                            let v = f.latent_identity[identity][j]
                                + m * f.latent_emotion[emotion][j]
                                + mouth * f.latent_mouth[j];
                            latent.push(v.clamp(-LATENT_CLAMP, LATENT_CLAMP));
                        }
                    }
                    let segments: &[usize] = if cfg.segment_positives { &[0, n / 2] } else { &[0] };
                    for &start in segments {
                        let vis = visual[start * d..(start + n) * d].to_vec();
                        let aud = audio[start * d..(start + n) * d].to_vec();
                        let lat = latent[start * p..(start + n) * p].to_vec();
                        clips.push(ClipRecord {
                            clip_id: clips.len() as u32,
                            video_id,
                            identity: identity as u32,
                            emotion: emotion as u32,
                            intensity: level as u32,
                            visual: FeatureSequence::new(Tensor::matrix(n, d, vis)?, Modality::Visual),
                            audio: FeatureSequence::new(Tensor::matrix(n, d, aud)?, Modality::Audio),
                            latent_video: Tensor::new(
                                vec![n, cfg.latent_channels, cfg.latent_height, cfg.latent_width],
                                lat,
                            )?,
                        });
                    }
                    video_id += 1;
                }
            }
        }
    }
    Ok(clips)
}

/// Neutral reference frame per identity: the mean visual frame over that
/// identity's emotion-0 clips (all clips if none are labelled 0).
pub fn identity_references(corpus: &[ClipRecord], identities: usize) -> Vec<Vec<f64>> {
    let d = corpus.first().map(|c| c.visual.frames.cols()).unwrap_or(0);
    (0..identities as u32)
        .map(|id| {
            let own: Vec<&ClipRecord> = corpus.iter().filter(|c| c.identity == id).collect();
            let neutral: Vec<&ClipRecord> = own.iter().copied().filter(|c| c.emotion == 0).collect();
            let pool = if neutral.is_empty() { own } else { neutral };
            let mut mean = vec![0.0; d];
            let mut count = 0usize;
            for c in pool {
                for r in 0..c.frames() {
                    for (m, x) in mean.iter_mut().zip(c.visual.frames.row(r)) {
                        *m += x;
                    }
                    count += 1;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count.max(1) as f64);
            mean
        })
        .collect()
}
