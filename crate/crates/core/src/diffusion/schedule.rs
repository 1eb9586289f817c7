use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::normal_vec;

/// Variance-preserving discrete schedule. The log signal-to-noise ratio
/// falls linearly from `logsnr_max` at `t = 0` to `logsnr_min` at `t = T`,
/// with `a_t² = sigmoid(logsnr)` and `b_t² = sigmoid(−logsnr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub sampler_steps: usize,
    pub logsnr_max: f64,
    pub logsnr_min: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl NoiseSchedule {
    pub fn new(timesteps: usize, sampler_steps: usize, logsnr_max: f64, logsnr_min: f64) -> Result<Self> {
        if timesteps == 0 || sampler_steps == 0 || sampler_steps > timesteps {
            return Err(Error::config("need 1 ≤ sampler_steps ≤ timesteps"));
        }
        if !(logsnr_max > logsnr_min) || !logsnr_max.is_finite() || !logsnr_min.is_finite() {
            return Err(Error::config("logsnr_max must exceed logsnr_min"));
        }
        let mut a = Vec::with_capacity(timesteps + 1);
        let mut b = Vec::with_capacity(timesteps + 1);
        for t in 0..=timesteps {
            let l = logsnr_max - (logsnr_max - logsnr_min) * t as f64 / timesteps as f64;
            let a2 = sigmoid(l);
            a.push(a2.sqrt());
            b.push((1.0 - a2).sqrt());
        }
        Ok(NoiseSchedule { timesteps, sampler_steps, logsnr_max, logsnr_min, a, b })
    }

    /// Schedule from explicit noise scales `b_0..=b_T` (non-decreasing, in
    /// `[0, 1]`); `a_t = sqrt(1 − b_t²)`. The log-SNR fields are left at
    /// their endpoint values for reference only.
    pub fn from_noise_scales(b: Vec<f64>, sampler_steps: usize) -> Result<Self> {
        let timesteps = b.len().saturating_sub(1);
        if timesteps == 0 || sampler_steps == 0 || sampler_steps > timesteps {
            return Err(Error::config("need at least two scales and 1 ≤ sampler_steps ≤ T"));
        }
        if b.iter().any(|x| !(0.0..=1.0).contains(x)) || b.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("noise scales must be non-decreasing within [0, 1]"));
        }
        let a: Vec<f64> = b.iter().map(|x| (1.0 - x * x).sqrt()).collect();
        let logsnr = |t: usize| 2.0 * (a[t] / b[t]).ln();
        Ok(NoiseSchedule {
            timesteps,
            sampler_steps,
            logsnr_max: logsnr(0),
            logsnr_min: logsnr(timesteps),
            a,
            b,
        })
    }

    /// Signal scale `a_t` for `t ∈ [0, T]`.
    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    /// Noise scale `b_t` for `t ∈ [0, T]`.
    pub fn b(&self, t: usize) -> f64 {
        self.b[t]
    }

    /// Sampler timesteps, high to low: `sampler_steps` evenly spaced values
    /// in `(0, T]`. Each step moves to the next entry, the last one to 0.
    pub fn sampler_timesteps(&self) -> Vec<usize> {
        let n = self.sampler_steps;
        (0..n)
            .map(|i| ((self.timesteps * (n - i)) as f64 / n as f64).round() as usize)
            .collect()
    }

    /// Quartile (0 = least noise) of a training timestep `t ∈ [1, T]`.
    pub fn noise_quartile(&self, t: usize) -> usize {
        ((t - 1) * 4 / self.timesteps).min(3)
    }
}

/// A noised latent `z_t = a_t z_0 + b_t ε` together with `t` and `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyLatent {
    pub z_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

pub fn add_noise<R: Rng + ?Sized>(z0: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<NoisyLatent> {
    if t == 0 || t > schedule.timesteps {
        return Err(Error::argument(format!("timestep {t} outside [1, {}]", schedule.timesteps)));
    }
    let eps = Tensor::new(z0.shape().to_vec(), normal_vec(rng, z0.numel()))?;
    Ok(noise_with(z0, t, schedule, eps))
}

pub(crate) fn noise_with(z0: &Tensor, t: usize, schedule: &NoiseSchedule, eps: Tensor) -> NoisyLatent {
    let (a, b) = (schedule.a(t), schedule.b(t));
    let z_t = Tensor::new(
        z0.shape().to_vec(),
        z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect(),
    )
    .expect("finite noised latent");
    NoisyLatent { z_t, t, eps }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_bounds() {
        let s = NoiseSchedule::new(50, 25, 8.0, -12.0).unwrap();
        assert!(s.b(0) <= 0.02);
        assert!(s.a(50) <= 0.05);
        for t in 0..=50 {
            assert!((s.a(t).powi(2) + s.b(t).powi(2) - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(s.a(t) < s.a(t - 1) && s.b(t) > s.b(t - 1));
            }
        }
        let ts = s.sampler_timesteps();
        assert_eq!(ts.len(), 25);
        assert_eq!(ts[0], 50);
        assert_eq!(ts[24], 2);
    }

    #[test]
    fn quartiles_cover_range() {
        let s = NoiseSchedule::new(50, 25, 8.0, -12.0).unwrap();
        assert_eq!(s.noise_quartile(1), 0);
        assert_eq!(s.noise_quartile(50), 3);
        let counts: Vec<usize> = (0..4).map(|q| (1..=50).filter(|&t| s.noise_quartile(t) == q).count()).collect();
        assert_eq!(counts, vec![13, 12, 13, 12]);
    }

    #[test]
    fn bad_timestep_rejected() {
        let s = NoiseSchedule::new(10, 5, 8.0, -12.0).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        let mut r = crate::rng::seeded(0);
        assert!(add_noise(&z, 0, &s, &mut r).is_err());
        assert!(add_noise(&z, 11, &s, &mut r).is_err());
        assert!(add_noise(&z, 10, &s, &mut r).is_ok());
    }
}
