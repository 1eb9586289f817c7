use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, LOG_FLOOR};
use crate::rng::normal_vec;
use crate::synthdata::{draw_condition_drops, DropFlags};

use super::{DiffusionModel, NullSlot};

/// Mean cross-entropy over per-timestep class distributions against a
/// one-hot target, with the log floored at `1e-12`.
pub fn cls_loss(p_list: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if y.is_empty() || ones != 1 || ones + zeros != y.len() {
        return Err(Error::argument("target must be one-hot"));
    }
    if p_list.is_empty() {
        return Err(Error::argument("need at least one distribution"));
    }
    let c = y.iter().position(|&v| v == 1.0).expect("one-hot");
    let mut total = 0.0;
    for p in p_list {
        if p.len() != y.len() {
            return Err(Error::argument("distribution and target lengths differ"));
        }
        total -= p[c].max(LOG_FLOOR).ln();
    }
    Ok(total / p_list.len() as f64)
}

/// Everything a training sample needs that does not change between steps.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Clean latent, `F × P`.
    pub latent: Tensor,
    /// `1 × d_s`.
    pub identity_embed: Tensor,
    /// `N × d_s`.
    pub audio_seq: Tensor,
    pub prior_mu: Vec<f64>,
    pub prior_sigma2: Vec<f64>,
    pub emotion: usize,
}

/// The random choices for one sample in one step.
#[derive(Clone, Debug)]
pub struct SampleDraw {
    pub t: usize,
    pub eps: Tensor,
    pub prior_eps: Vec<f64>,
    pub drop: DropFlags,
}

impl SampleDraw {
    pub fn draw<R: Rng + ?Sized>(sample: &TrainSample, timesteps: usize, condition_drop: bool, rng: &mut R) -> Self {
        let t = rng.random_range(1..=timesteps);
        let eps = Tensor::from_parts(sample.latent.shape().to_vec(), normal_vec(rng, sample.latent.numel()));
        let prior_eps = normal_vec(rng, sample.prior_mu.len());
        let drop = if condition_drop { draw_condition_drops(rng) } else { DropFlags::NONE };
        SampleDraw { t, eps, prior_eps, drop }
    }
}

/// Batch loss handles and values.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub total_value: f64,
    pub denoising: f64,
    pub cls: f64,
    pub vq: f64,
    /// Retrieved code and the prior sample that retrieved it, for samples
    /// whose emotion condition was kept.
    pub retrievals: Vec<(usize, Vec<f64>)>,
    /// Discriminator probabilities and noise timestep per sample.
    pub probs: Vec<(usize, Vec<f64>)>,
}

/// `L = L_denoising + λ·L_cls + L_vq`, each averaged over the batch. A
/// sample whose emotion condition is dropped contributes zero to `L_cls`
/// and `L_vq` (but still counts in the batch size).
pub fn total_loss(
    tape: &mut Tape,
    model: &DiffusionModel,
    samples: &[TrainSample],
    draws: &[SampleDraw],
    lambda_cls: f64,
    beta: f64,
) -> Result<LossParts> {
    if samples.is_empty() || samples.len() != draws.len() {
        return Err(Error::argument("need one draw per sample and a non-empty batch"));
    }
    if !(lambda_cls >= 0.0) {
        return Err(Error::argument("lambda_cls must be non-negative"));
    }
    let b = samples.len() as f64;
    let mut den_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut vq_terms = Vec::new();
    let mut retrievals = Vec::new();
    let mut probs = Vec::new();
    for (s, d) in samples.iter().zip(draws) {
        if d.t == 0 || d.t > model.schedule.timesteps {
            return Err(Error::argument(format!("timestep {} out of range", d.t)));
        }
        let noisy = super::schedule::noise_with(&s.latent, d.t, &model.schedule, d.eps.clone());
        let z = tape.leaf(noisy.z_t);
        let identity = if d.drop.image {
            model.null_var(tape, NullSlot::Identity)
        } else {
            tape.leaf(s.identity_embed.clone())
        };
        let audio = if d.drop.audio {
            model.null_var(tape, NullSlot::Audio)
        } else {
            tape.leaf(s.audio_seq.clone())
        };
        let emotion = if d.drop.emotion {
            model.null_var(tape, NullSlot::Emotion)
        } else {
            let sample: Vec<f64> = s
                .prior_mu
                .iter()
                .zip(&s.prior_sigma2)
                .zip(&d.prior_eps)
                .map(|((m, v), e)| m + v.max(0.0).sqrt() * e)
                .collect();
            let sv = tape.leaf(Tensor::row_vector(sample.clone())?);
            let (e_s, k) = model.bank.attend_train_var(tape, &model.params, sv)?;
            vq_terms.push(model.bank.vq_loss_var(tape, &model.params, sv, k, beta));
            retrievals.push((k, sample));
            e_s
        };
        let fw = model.forward_var(tape, z, d.t, identity, audio, emotion);
        let target = tape.leaf(d.eps.clone().reshape(vec![s.latent.rows(), s.latent.cols()])?);
        let diff = tape.sub(fw.eps_hat, target);
        let sq = tape.square(diff);
        den_terms.push(tape.mean(sq));
        let p = model.discriminate_var(tape, fw.f_t);
        probs.push((d.t, tape.value(p).data().to_vec()));
        if !d.drop.emotion {
            let pc = tape.pick(p, s.emotion);
            let lp = tape.ln(pc);
            cls_terms.push(tape.scale(lp, -1.0));
        }
    }
    let batch_mean = |tape: &mut Tape, terms: &[Var]| -> Option<Var> {
        if terms.is_empty() {
            return None;
        }
        let stacked = tape.concat_rows(terms);
        let total = tape.sum(stacked);
        Some(tape.scale(total, 1.0 / b))
    };
    let den = batch_mean(tape, &den_terms).expect("non-empty batch");
    let mut total = den;
    let denoising = tape.scalar(den);
    let mut cls = 0.0;
    let mut vq = 0.0;
    if let Some(c) = batch_mean(tape, &cls_terms) {
        cls = tape.scalar(c);
        let weighted = tape.scale(c, lambda_cls);
        total = tape.add(total, weighted);
    }
    if let Some(v) = batch_mean(tape, &vq_terms) {
        vq = tape.scalar(v);
        total = tape.add(total, v);
    }
    Ok(LossParts { total, total_value: tape.scalar(total), denoising, cls, vq, retrievals, probs })
}
