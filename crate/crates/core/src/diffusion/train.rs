use rand::Rng;
use rayon::prelude::*;

use crate::bank::{BankConfig, DeadCodeTracker};
use crate::embedder::EmbedderModel;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape, Tensor};
use crate::rng;
use crate::synthdata::{identity_references, ClipRecord};

use super::loss::{total_loss, SampleDraw, TrainSample};
use super::{schedule::noise_with, DiffusionConfig, DiffusionModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub denoising: f64,
    pub cls: f64,
    pub vq: f64,
}

#[derive(Clone, Debug)]
pub struct DiffusionTraining {
    pub model: DiffusionModel,
    pub curve: Vec<LossRecord>,
    /// Number of dead-code re-seeds performed.
    pub reseeds: usize,
}

const TRAIN_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;

/// Identity embedding of every identity: the frozen visual projection of its
/// neutral reference frame, as a `1 × d_s` row.
pub fn identity_embeddings(corpus: &[ClipRecord], embedder: &EmbedderModel) -> Result<Vec<Tensor>> {
    let identities = corpus.iter().map(|c| c.identity as usize + 1).max().unwrap_or(0);
    identity_references(corpus, identities)
        .iter()
        .map(|r| Tensor::row_vector(embedder.project_visual(r)?))
        .collect()
}

/// The denoiser's audio condition: frozen audio-stream features with each
/// feature's mean over the clip removed. The mean carries the clip-level
/// emotion of the speech; removing it leaves the frame-to-frame content that
/// drives the mouth, so emotion has to come from the emotion condition.
pub fn speech_features(embedder: &EmbedderModel, clip: &ClipRecord) -> Result<Tensor> {
    let mut feats = embedder.audio_features(clip)?;
    let (rows, cols) = (feats.rows(), feats.cols());
    let data = feats.data_mut();
    for j in 0..cols {
        let mean = (0..rows).map(|i| data[i * cols + j]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            data[i * cols + j] -= mean;
        }
    }
    Ok(feats)
}

/// Frozen-embedder conditions for every clip, in corpus order.
pub fn prepare_samples(corpus: &[ClipRecord], embedder: &EmbedderModel) -> Result<Vec<TrainSample>> {
    let ids = identity_embeddings(corpus, embedder)?;
    corpus
        .par_iter()
        .map(|clip| {
            let mut tape = Tape::new();
            let pv = embedder.prior_vars(&mut tape, clip, None)?;
            Ok(TrainSample {
                latent: clip.latent_matrix(),
                identity_embed: ids[clip.identity as usize].clone(),
                audio_seq: speech_features(embedder, clip)?,
                prior_mu: tape.value(pv.mu).data().to_vec(),
                prior_sigma2: tape.value(pv.sigma2).data().to_vec(),
                emotion: clip.emotion as usize,
            })
        })
        .collect()
}

/// Jointly trains denoiser, bank, discriminator and null embeddings with the
/// compositional loss. The embedder stays frozen.
pub fn train_diffusion(
    corpus: &[ClipRecord],
    embedder: &EmbedderModel,
    cfg: &DiffusionConfig,
    bank_cfg: &BankConfig,
    emotions: usize,
    seed: u64,
) -> Result<DiffusionTraining> {
    cfg.validate()?;
    let samples = prepare_samples(corpus, embedder)?;
    train_on_samples(&samples, cfg, bank_cfg, emotions, seed)
}

pub fn train_on_samples(
    samples: &[TrainSample],
    cfg: &DiffusionConfig,
    bank_cfg: &BankConfig,
    emotions: usize,
    seed: u64,
) -> Result<DiffusionTraining> {
    let first = samples.first().ok_or_else(|| Error::data("empty corpus"))?;
    let mut model = DiffusionModel::from_config(
        cfg,
        bank_cfg,
        first.latent.cols(),
        first.prior_mu.len(),
        emotions,
        &mut rng::stream(seed, INIT_STREAM),
    )?;
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut tracker = DeadCodeTracker::new(model.bank.len(), bank_cfg.dead_code_steps);
    let mut rng = rng::stream(seed, TRAIN_STREAM);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| samples[rng.random_range(0..samples.len())].clone())
            .collect();
        let draws: Vec<SampleDraw> = batch
            .iter()
            .map(|s| SampleDraw::draw(s, model.schedule.timesteps, cfg.condition_dropout, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let parts = total_loss(&mut tape, &model, &batch, &draws, cfg.lambda_cls, bank_cfg.beta)?;
        if !parts.total_value.is_finite() {
            return Err(Error::Training { step, reason: format!("loss is {}", parts.total_value) });
        }
        tape.backward(parts.total, &mut model.params)
            .map_err(|e| Error::Training { step, reason: e.to_string() })?;
        opt.step(&mut model.params);
        for (k, s) in &parts.retrievals {
            tracker.observe(step + 1, *k, s);
        }
        for (k, value) in tracker.expired(step + 1, &mut rng) {
            model.bank.set_code(&mut model.params, k, &value);
            opt.reset_row(model.bank.codes_id(), k, model.bank.d_s());
        }
        curve.push(LossRecord {
            step,
            total: parts.total_value,
            denoising: parts.denoising,
            cls: parts.cls,
            vq: parts.vq,
        });
        log::debug!(
            "diffusion step {step}: total {:.4} den {:.4} cls {:.4} vq {:.4}",
            parts.total_value,
            parts.denoising,
            parts.cls,
            parts.vq
        );
    }
    Ok(DiffusionTraining { model, curve, reseeds: tracker.reseeds })
}

/// Discriminator accuracy on noised training latents, bucketed into the
/// four noise quartiles (index 0 = least noise). Each evaluation draws `t`
/// uniformly; returns `(accuracy, count)` per quartile.
pub fn quartile_accuracy(
    model: &DiffusionModel,
    samples: &[TrainSample],
    evaluations: usize,
    seed: u64,
) -> Result<[(f64, usize); 4]> {
    if samples.is_empty() {
        return Err(Error::data("no samples to evaluate"));
    }
    let outcomes: Vec<(usize, bool)> = (0..evaluations)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let s = &samples[i % samples.len()];
            let t = r.random_range(1..=model.schedule.timesteps);
            let eps = Tensor::new(s.latent.shape().to_vec(), rng::normal_vec(&mut r, s.latent.numel()))?;
            let noisy = noise_with(&s.latent, t, &model.schedule, eps);
            let mut tape = Tape::new();
            let z = tape.leaf(noisy.z_t);
            let id = tape.leaf(s.identity_embed.clone());
            let f = model.features_var(&mut tape, z, t, id);
            let p = model.discriminate_var(&mut tape, f);
            let hit = crate::eval::argmax(tape.value(p).data()) == s.emotion;
            Ok((model.schedule.noise_quartile(t), hit))
        })
        .collect::<Result<_>>()?;
    let mut out = [(0.0, 0usize); 4];
    for (q, hit) in outcomes {
        out[q].1 += 1;
        if hit {
            out[q].0 += 1.0;
        }
    }
    for o in &mut out {
        if o.1 > 0 {
            o.0 /= o.1 as f64;
        }
    }
    Ok(out)
}

