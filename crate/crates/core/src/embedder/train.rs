use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape, Var};
use crate::rng::{self, normal_vec};
use crate::synthdata::{modality_dropout, sample_pairs, ClipRecord, PairBatch};

use super::{info_nce_var, EmbedderConfig, EmbedderModel};

/// Trained embedder plus its loss curve.
#[derive(Clone, Debug)]
pub struct EmbedderTraining {
    pub model: EmbedderModel,
    /// Mean InfoNCE of each training batch.
    pub losses: Vec<f64>,
    /// Loss on a fixed held batch (no dropout) before the first step.
    pub initial_eval_loss: f64,
    /// Loss on the same held batch after the last step.
    pub final_eval_loss: f64,
}

const TRAIN_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Builds the mean InfoNCE of a pair batch on the tape. Each distinct clip
/// is encoded once; with `dropout` set, modality dropout is applied to the
/// batch first.
pub fn batch_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &EmbedderModel,
    batch: &PairBatch<'_>,
    cfg: &EmbedderConfig,
    dropout: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut order: BTreeMap<u32, usize> = BTreeMap::new();
    let mut clips: Vec<ClipRecord> = Vec::new();
    let all = batch
        .anchors
        .iter()
        .chain(&batch.positives)
        .chain(batch.negatives.iter().flatten());
    for c in all {
        if let std::collections::btree_map::Entry::Vacant(e) = order.entry(c.clip_id) {
            e.insert(clips.len());
            clips.push((*c).clone());
        }
    }
    if dropout {
        clips = modality_dropout(clips, cfg.p_audio_drop, cfg.p_visual_drop, rng)?;
    }
    let mut samples = Vec::with_capacity(clips.len());
    for clip in &clips {
        let eps = (!cfg.deterministic_mu).then(|| normal_vec(rng, model.d_s()));
        let vars = model.prior_vars(tape, clip, eps.as_deref())?;
        samples.push(vars.sample);
    }
    let var_of = |c: &ClipRecord| samples[order[&c.clip_id]];
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let negs: Vec<Var> = batch.negatives[i].iter().map(|c| var_of(c)).collect();
        losses.push(info_nce_var(tape, var_of(batch.anchors[i]), var_of(batch.positives[i]), &negs, cfg.tau));
    }
    let stacked = tape.concat_rows(&losses);
    Ok(tape.mean(stacked))
}

fn held_loss(model: &EmbedderModel, corpus: &[ClipRecord], cfg: &EmbedderConfig, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, EVAL_STREAM);
    let batch = sample_pairs(corpus, cfg.eval_pairs, cfg.negatives, &mut rng)?;
    let mut tape = Tape::new();
    let loss = batch_loss(&mut tape, model, &batch, cfg, false, &mut rng)?;
    Ok(tape.scalar(loss))
}

/// Optimises mean InfoNCE over sampled pair batches with Adam. The result
/// is a pure function of `(corpus, cfg, seed)`.
pub fn train_embedder(corpus: &[ClipRecord], cfg: &EmbedderConfig, seed: u64) -> Result<EmbedderTraining> {
    cfg.validate()?;
    let d_raw = corpus
        .first()
        .map(|c| c.visual.frames.cols())
        .ok_or_else(|| Error::data("empty corpus"))?;
    let mut model = EmbedderModel::new(d_raw, cfg, &mut rng::stream(seed, INIT_STREAM))?;
    let initial_eval_loss = held_loss(&model, corpus, cfg, seed)?;
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut rng = rng::stream(seed, TRAIN_STREAM);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_pairs(corpus, cfg.batch_size, cfg.negatives, &mut rng)?;
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &model, &batch, cfg, true, &mut rng)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training { step, reason: format!("InfoNCE loss is {value}") });
        }
        tape.backward(loss, &mut model.params)
            .map_err(|e| Error::Training { step, reason: e.to_string() })?;
        opt.step(&mut model.params);
        losses.push(value);
        log::debug!("embedder step {step}: loss {value:.5}");
    }
    let final_eval_loss = held_loss(&model, corpus, cfg, seed)?;
    Ok(EmbedderTraining { model, losses, initial_eval_loss, final_eval_loss })
}
