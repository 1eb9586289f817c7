use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::bank::ConditionEmbedding;
use crate::diffusion::{emotion_prompts, sample_guided, ConditionSet, DiffusionModel, TrainSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, normal_vec};
use crate::synthdata::DropFlags;

use super::{argmax, emo_accuracy};

/// Emotion prompts from the prior means of a set of training samples.
pub fn prompts_from_samples(samples: &[TrainSample], emotions: usize) -> Result<Vec<Vec<f64>>> {
    let priors: Vec<Vec<f64>> = samples.iter().map(|s| s.prior_mu.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.emotion).collect();
    emotion_prompts(&priors, &labels, emotions)
}

/// One generated latent scored by the discriminator, plus the same draw
/// regenerated under a different emotion condition.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPair {
    pub source_clip: usize,
    pub target: usize,
    pub probs: Vec<f64>,
    pub swap_target: usize,
    pub swap_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationReport {
    pub pairs: Vec<GeneratedPair>,
    pub accuracy: f64,
    /// Fraction of pairs whose argmax class changed under the swap.
    pub swap_changed: f64,
    /// Mean of every latent coordinate over all generated samples, per
    /// latent channel.
    pub channel_means: Vec<f64>,
}

/// Generates `per_emotion` latents for every emotion. Sample `i` takes the
/// identity and audio of a uniformly drawn training clip, starts from its own
/// noise stream, and is conditioned on the emotion prompt through full-bank
/// attention. Each draw is repeated with a different target emotion.
pub fn generate_and_score(
    model: &DiffusionModel,
    samples: &[TrainSample],
    prompts: &[Vec<f64>],
    per_emotion: usize,
    latent_shape: &[usize],
    guidance: f64,
    seed: u64,
) -> Result<GenerationReport> {
    let emotions = prompts.len();
    if emotions < 2 || samples.is_empty() || per_emotion == 0 {
        return Err(Error::data("generation needs two or more prompts, samples and a positive count"));
    }
    let conditions: Vec<ConditionEmbedding> =
        prompts.iter().map(|p| model.emotion_condition(p)).collect::<Result<_>>()?;
    let total = per_emotion * emotions;
    let pairs: Vec<(GeneratedPair, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let target = i % emotions;
            let swap_target = (target + 1 + r.random_range(0..emotions - 1)) % emotions;
            let source_clip = r.random_range(0..samples.len());
            let src = &samples[source_clip];
            let numel: usize = latent_shape.iter().product();
            let z_t = Tensor::new(latent_shape.to_vec(), normal_vec(&mut r, numel))?;
            let run = |e: usize| -> Result<(Vec<f64>, Tensor)> {
                let cs = ConditionSet {
                    identity_embed: src.identity_embed.clone(),
                    audio_seq: src.audio_seq.clone(),
                    emotion: conditions[e].clone(),
                    drop: DropFlags::NONE,
                };
                let traj = crate::diffusion::sample_from(model, &cs, z_t.clone(), guidance)?;
                let z0 = traj.last().expect("non-empty trajectory").clone();
                Ok((model.classify_latent(&z0, &src.identity_embed)?, z0))
            };
            let (probs, z0) = run(target)?;
            let (swap_probs, _) = run(swap_target)?;
            Ok((GeneratedPair { source_clip, target, probs, swap_target, swap_probs }, z0.into_data()))
        })
        .collect::<Result<_>>()?;
    let channels = latent_shape.get(1).copied().unwrap_or(1);
    let frame = numel_per_frame(latent_shape);
    let per_channel = frame / channels;
    let mut sums = vec![0.0; channels];
    let mut count = 0usize;
    for (_, data) in &pairs {
        for (j, x) in data.iter().enumerate() {
            sums[(j % frame) / per_channel] += x;
        }
        count += data.len() / channels;
    }
    let channel_means = sums.into_iter().map(|s| s / count as f64).collect();
    let pairs: Vec<GeneratedPair> = pairs.into_iter().map(|(p, _)| p).collect();
    let probs: Vec<Vec<f64>> = pairs.iter().map(|p| p.probs.clone()).collect();
    let targets: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    let accuracy = emo_accuracy(&probs, &targets)?;
    let changed = pairs.iter().filter(|p| argmax(&p.probs) != argmax(&p.swap_probs)).count();
    Ok(GenerationReport {
        swap_changed: changed as f64 / pairs.len() as f64,
        pairs,
        accuracy,
        channel_means,
    })
}

fn numel_per_frame(shape: &[usize]) -> usize {
    shape.iter().skip(1).product::<usize>().max(1)
}

/// Per-channel mean of the clean training latents.
pub fn corpus_channel_means(samples: &[TrainSample], channels: usize) -> Vec<f64> {
    let mut sums = vec![0.0; channels];
    let mut count = 0usize;
    for s in samples {
        let frame = s.latent.cols();
        let per_channel = frame / channels;
        for (j, x) in s.latent.data().iter().enumerate() {
            sums[(j % frame) / per_channel] += x;
        }
        count += s.latent.numel() / channels;
    }
    sums.into_iter().map(|s| s / count as f64).collect()
}

/// Share of clips whose retrieved code equals the most common code of their
/// emotion class, plus that majority code per emotion.
#[derive(Clone, Debug, PartialEq)]
pub struct CodePurity {
    pub purity: f64,
    pub majority: BTreeMap<usize, usize>,
    /// Whether every emotion has a different majority code.
    pub distinct: bool,
}

pub fn code_purity(model: &DiffusionModel, samples: &[TrainSample]) -> Result<CodePurity> {
    if samples.is_empty() {
        return Err(Error::data("no samples"));
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for s in samples {
        let (k, _) = model.bank.retrieve(&model.params, &s.prior_mu)?;
        *counts.entry(s.emotion).or_default().entry(k).or_insert(0) += 1;
    }
    let mut majority = BTreeMap::new();
    let mut agree = 0usize;
    for (e, by_code) in &counts {
        // most common code, lowest index on ties
        let (&code, &n) = by_code
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty class");
        majority.insert(*e, code);
        agree += n;
    }
    let mut codes: Vec<usize> = majority.values().copied().collect();
    codes.sort_unstable();
    codes.dedup();
    Ok(CodePurity {
        purity: agree as f64 / samples.len() as f64,
        distinct: codes.len() == majority.len(),
        majority,
    })
}

/// Target-class probability along an interpolation path: each interpolant is
/// turned into a condition via full-bank attention, `draws` latents are
/// generated and scored, and the mean class probabilities are returned.
pub fn interpolation_curve(
    model: &DiffusionModel,
    samples: &[TrainSample],
    path: &[Vec<f64>],
    draws: usize,
    latent_shape: &[usize],
    guidance: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() || draws == 0 {
        return Err(Error::data("interpolation scoring needs samples and draws"));
    }
    let emotions = model.dims.emotions;
    path.iter()
        .map(|point| {
            let cond = model.emotion_condition(point)?;
            let probs: Vec<Vec<f64>> = (0..draws)
                .into_par_iter()
                .map(|j| {
                    // same draws at every point of the path
                    let mut r = rng::stream(seed, j as u64);
                    let src = &samples[r.random_range(0..samples.len())];
                    let cs = ConditionSet {
                        identity_embed: src.identity_embed.clone(),
                        audio_seq: src.audio_seq.clone(),
                        emotion: cond.clone(),
                        drop: DropFlags::NONE,
                    };
                    let traj = sample_guided(model, &cs, latent_shape, guidance, &mut r)?;
                    model.classify_latent(traj.last().expect("non-empty trajectory"), &src.identity_embed)
                })
                .collect::<Result<_>>()?;
            let mut mean = vec![0.0; emotions];
            for p in &probs {
                mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / draws as f64);
            }
            Ok(mean)
        })
        .collect()
}
