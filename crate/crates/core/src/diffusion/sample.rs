use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::normal_vec;
use crate::synthdata::DropFlags;

use super::{ConditionSet, DiffusionModel};

const LATENT_CLAMP: f64 = 3.0;

/// Deterministic DDIM reverse pass from `z_T ~ N(0, I)` over the schedule's
/// sampler timesteps. Returns the latent after every step; the last entry is
/// the clean estimate.
pub fn sample<R: Rng + ?Sized>(
    model: &DiffusionModel,
    conditions: &ConditionSet,
    shape: &[usize],
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    sample_guided(model, conditions, shape, 1.0, rng)
}

/// [`sample`] with classifier-free guidance: the prediction is
/// `ε_null + w·(ε_cond − ε_null)`. `w = 1` skips the unconditioned pass.
pub fn sample_guided<R: Rng + ?Sized>(
    model: &DiffusionModel,
    conditions: &ConditionSet,
    shape: &[usize],
    guidance: f64,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if shape.is_empty() || shape.iter().product::<usize>() == 0 {
        return Err(Error::argument("latent shape must be non-empty"));
    }
    let z_t = Tensor::new(shape.to_vec(), normal_vec(rng, shape.iter().product()))?;
    sample_from(model, conditions, z_t, guidance)
}

/// Reverse pass from a given starting latent.
pub fn sample_from(model: &DiffusionModel, conditions: &ConditionSet, mut z: Tensor, guidance: f64) -> Result<Vec<Tensor>> {
    let s = &model.schedule;
    let ts = s.sampler_timesteps();
    let unconditioned = ConditionSet { drop: DropFlags::ALL, ..conditions.clone() };
    let mut trajectory = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let (mut eps, _) = model.predict_noise(&z, conditions, t)?;
        if guidance != 1.0 {
            let (eps_null, _) = model.predict_noise(&z, &unconditioned, t)?;
            let data = eps_null
                .data()
                .iter()
                .zip(eps.data())
                .map(|(u, c)| u + guidance * (c - u))
                .collect();
            eps = Tensor::new(eps.shape().to_vec(), data)?;
        }
        let (a, b) = (s.a(t), s.b(t));
        let z0: Vec<f64> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| ((x - b * e) / a).clamp(-LATENT_CLAMP, LATENT_CLAMP))
            .collect();
        let next = match ts.get(i + 1) {
            Some(&tp) => {
                let (ap, bp) = (s.a(tp), s.b(tp));
                z0.iter().zip(eps.data()).map(|(x, e)| ap * x + bp * e).collect()
            }
            None => z0,
        };
        z = Tensor::new(z.shape().to_vec(), next)?;
        trajectory.push(z.clone());
    }
    Ok(trajectory)
}

/// Mean prior per emotion class ("emotion prompts").
pub fn emotion_prompts(priors: &[Vec<f64>], labels: &[usize], emotions: usize) -> Result<Vec<Vec<f64>>> {
    if priors.len() != labels.len() || priors.is_empty() {
        return Err(Error::data("need one label per prior and at least one prior"));
    }
    let d = priors[0].len();
    let mut sums = vec![vec![0.0; d]; emotions];
    let mut counts = vec![0usize; emotions];
    for (p, &l) in priors.iter().zip(labels) {
        if l >= emotions {
            return Err(Error::data(format!("emotion label {l} out of range")));
        }
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    if let Some(e) = counts.iter().position(|&c| c == 0) {
        return Err(Error::data(format!("no prior for emotion {e}")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect())
}
