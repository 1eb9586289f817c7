use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::bank::{BankConfig, ConditionEmbedding, EmotionBank, SourceMode};
use crate::checkpoint::{self, DIFFUSION_MAGIC, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::synthdata::DropFlags;

use super::{ConditionSet, DiffusionConfig, NoiseSchedule};

/// Sizes that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Latent values per frame (`C·H·W`).
    pub latent_dim: usize,
    pub d_model: usize,
    pub d_s: usize,
    pub temb_dim: usize,
    pub ffn_hidden: usize,
    pub disc_hidden: usize,
    pub emotions: usize,
}

#[derive(Clone, Debug)]
struct Denoiser {
    w_in: ParamId,
    b_in: ParamId,
    w_t: ParamId,
    b_t: ParamId,
    w_id: ParamId,
    wq_a: ParamId,
    wk_a: ParamId,
    wv_a: ParamId,
    wq_e: ParamId,
    wk_e: ParamId,
    wv_e: ParamId,
    wq_s: ParamId,
    wk_s: ParamId,
    wv_s: ParamId,
    wo_s: ParamId,
    ff1: ParamId,
    fb1: ParamId,
    ff2: ParamId,
    w_out: ParamId,
    /// Head weights on the noise-scaled input `b_t·z_t`.
    w_skip: ParamId,
    b_out: ParamId,
}

/// Mean-pool over frames followed by a two-layer classifier to emotion logits.
#[derive(Clone, Debug)]
pub struct EmotionDiscriminator {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Nulls {
    audio: ParamId,
    identity: ParamId,
    emotion: ParamId,
}

/// Tape handles produced by one denoiser pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predicted noise, `F × P`.
    pub eps_hat: Var,
    /// Frame features before any condition is fused (`F × d_model`).
    pub f_t: Var,
}

/// Denoiser, emotion bank, discriminator and null embeddings sharing one
/// parameter set so they can be optimised jointly.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    pub bank: EmotionBank,
    pub discriminator: EmotionDiscriminator,
    pub dims: ModelDims,
    den: Denoiser,
    nulls: Nulls,
}

fn lin<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], gain / (rows as f64).sqrt(), rng)
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(1000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

impl DiffusionModel {
    pub fn new<R: Rng + ?Sized>(
        dims: ModelDims,
        schedule: NoiseSchedule,
        bank_cfg: &BankConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let ModelDims { latent_dim: p, d_model: d, d_s, temb_dim, ffn_hidden: h, disc_hidden, emotions } = dims;
        if [p, d, d_s, temb_dim, h, disc_hidden, emotions].contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        let mut ps = ParamSet::new();
        let den = Denoiser {
            w_in: ps.add("den.w_in", lin(p, d, 1.0, rng))?,
            b_in: ps.add("den.b_in", Tensor::zeros(&[1, d]))?,
            w_t: ps.add("den.w_t", lin(temb_dim, d, 1.0, rng))?,
            b_t: ps.add("den.b_t", Tensor::zeros(&[1, d]))?,
            w_id: ps.add("den.w_id", lin(d_s, d, 1.0, rng))?,
            wq_a: ps.add("den.wq_a", lin(d, d, 1.0, rng))?,
            wk_a: ps.add("den.wk_a", lin(d_s, d, 1.0, rng))?,
            wv_a: ps.add("den.wv_a", lin(d_s, d, 1.0, rng))?,
            wq_e: ps.add("den.wq_e", lin(d, d, 1.0, rng))?,
            wk_e: ps.add("den.wk_e", lin(d_s, d, 1.0, rng))?,
            wv_e: ps.add("den.wv_e", lin(d_s, d, 1.0, rng))?,
            wq_s: ps.add("den.wq_s", lin(d, d, 1.0, rng))?,
            wk_s: ps.add("den.wk_s", lin(d, d, 1.0, rng))?,
            wv_s: ps.add("den.wv_s", lin(d, d, 1.0, rng))?,
            wo_s: ps.add("den.wo_s", lin(d, d, 0.5, rng))?,
            ff1: ps.add("den.ff1", lin(d, h, 1.0, rng))?,
            fb1: ps.add("den.fb1", Tensor::zeros(&[1, h]))?,
            ff2: ps.add("den.ff2", lin(h, d, 0.5, rng))?,
            w_out: ps.add("den.w_out", lin(d, p, 0.5, rng))?,
            w_skip: ps.add("den.w_skip", Tensor::eye(p))?,
            b_out: ps.add("den.b_out", Tensor::zeros(&[1, p]))?,
        };
        let bank = EmotionBank::new(&mut ps, d_s, bank_cfg, rng)?;
        let discriminator = EmotionDiscriminator {
            w1: ps.add("disc.w1", lin(d, disc_hidden, 1.0, rng))?,
            b1: ps.add("disc.b1", Tensor::zeros(&[1, disc_hidden]))?,
            w2: ps.add("disc.w2", lin(disc_hidden, emotions, 1.0, rng))?,
            b2: ps.add("disc.b2", Tensor::zeros(&[1, emotions]))?,
        };
        let nulls = Nulls {
            audio: ps.add("null.audio", Tensor::randn(&[1, d_s], 0.1, rng))?,
            identity: ps.add("null.identity", Tensor::randn(&[1, d_s], 0.1, rng))?,
            emotion: ps.add("null.emotion", Tensor::randn(&[1, d_s], 0.1, rng))?,
        };
        Ok(DiffusionModel { params: ps, schedule, bank, discriminator, dims, den, nulls })
    }

    pub fn from_config<R: Rng + ?Sized>(
        cfg: &DiffusionConfig,
        bank_cfg: &BankConfig,
        latent_dim: usize,
        d_s: usize,
        emotions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = ModelDims {
            latent_dim,
            d_model: cfg.d_model,
            d_s,
            temb_dim: cfg.temb_dim,
            ffn_hidden: cfg.ffn_hidden,
            disc_hidden: cfg.disc_hidden,
            emotions,
        };
        Self::new(dims, cfg.schedule()?, bank_cfg, rng)
    }

    fn check_latent(&self, z: &Tensor) -> Result<Tensor> {
        let f = z.shape().first().copied().unwrap_or(0);
        if f == 0 || z.numel() != f * self.dims.latent_dim {
            return Err(Error::argument(format!(
                "latent of shape {:?} does not have {} values per frame",
                z.shape(),
                self.dims.latent_dim
            )));
        }
        z.clone().reshape(vec![f, self.dims.latent_dim])
    }

    fn check_row(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.rank() != 2 || t.cols() != self.dims.d_s || t.rows() == 0 {
            return Err(Error::argument(format!(
                "{what} has shape {:?}, expected rows × {}",
                t.shape(),
                self.dims.d_s
            )));
        }
        Ok(())
    }

    pub fn null_var(&self, tape: &mut Tape, slot: NullSlot) -> Var {
        let id = match slot {
            NullSlot::Audio => self.nulls.audio,
            NullSlot::Identity => self.nulls.identity,
            NullSlot::Emotion => self.nulls.emotion,
        };
        tape.param(&self.params, id)
    }

    pub fn null_value(&self, slot: NullSlot) -> &Tensor {
        let id = match slot {
            NullSlot::Audio => self.nulls.audio,
            NullSlot::Identity => self.nulls.identity,
            NullSlot::Emotion => self.nulls.emotion,
        };
        self.params.value(id)
    }

    /// Frame features before conditioning: per-frame latent projection plus
    /// timestep and identity embeddings. The identity vector is RMS-normalised
    /// first, as are the audio rows before their keys and values, so condition
    /// scale does not swamp the latent.
    pub fn features_var(&self, tape: &mut Tape, z_t: Var, t: usize, identity: Var) -> Var {
        let p = &self.params;
        let d = &self.den;
        let (w_in, b_in) = (tape.param(p, d.w_in), tape.param(p, d.b_in));
        let x = tape.matmul(z_t, w_in);
        let x = tape.add_row(x, b_in);
        let temb = tape.leaf(timestep_embedding(t, self.dims.temb_dim));
        let (w_t, b_t) = (tape.param(p, d.w_t), tape.param(p, d.b_t));
        let te = tape.matmul(temb, w_t);
        let te = tape.add_row(te, b_t);
        let x = tape.add_row(x, te);
        let w_id = tape.param(p, d.w_id);
        let id_n = tape.rms_norm_rows(identity);
        let ie = tape.matmul(id_n, w_id);
        tape.add_row(x, ie)
    }

    /// `z_a + CA(Q(z_a), K(E_s), V(E_s))` with bias-free projections.
    pub fn inject_emotion_var(&self, tape: &mut Tape, z_a: Var, e_s: Var) -> Var {
        let p = &self.params;
        let (wq, wk, wv) = (tape.param(p, self.den.wq_e), tape.param(p, self.den.wk_e), tape.param(p, self.den.wv_e));
        let q = tape.matmul(z_a, wq);
        let k = tape.matmul(e_s, wk);
        let v = tape.matmul(e_s, wv);
        let ca = tape.attention(q, k, v);
        tape.add(z_a, ca)
    }

    /// Full denoiser pass on already-resolved condition tensors.
    pub fn forward_var(&self, tape: &mut Tape, z_t: Var, t: usize, identity: Var, audio: Var, e_s: Var) -> Forward {
        let p = &self.params;
        let d = &self.den;
        let f_t = self.features_var(tape, z_t, t, identity);

        let n = tape.rms_norm_rows(f_t);
        let (wq, wk, wv) = (tape.param(p, d.wq_a), tape.param(p, d.wk_a), tape.param(p, d.wv_a));
        let q = tape.matmul(n, wq);
        let audio_n = tape.rms_norm_rows(audio);
        let k = tape.matmul(audio_n, wk);
        let v = tape.matmul(audio_n, wv);
        let a = tape.attention(q, k, v);
        let h = tape.add(f_t, a);

        let h = self.inject_emotion_var(tape, h, e_s);

        let n = tape.rms_norm_rows(h);
        let (wq, wk, wv, wo) = (
            tape.param(p, d.wq_s),
            tape.param(p, d.wk_s),
            tape.param(p, d.wv_s),
            tape.param(p, d.wo_s),
        );
        let q = tape.matmul(n, wq);
        let k = tape.matmul(n, wk);
        let v = tape.matmul(n, wv);
        let sa = tape.attention(q, k, v);
        let sa = tape.matmul(sa, wo);
        let h = tape.add(h, sa);

        let n = tape.rms_norm_rows(h);
        let (f1, b1, f2) = (tape.param(p, d.ff1), tape.param(p, d.fb1), tape.param(p, d.ff2));
        let u = tape.matmul(n, f1);
        let u = tape.add_row(u, b1);
        let u = tape.silu(u);
        let u = tape.matmul(u, f2);
        let h = tape.add(h, u);

        // ε̂ = b_t·z_t·W_skip + a_t·(h·W_out + b_out): the learned part is a
        // velocity-style residual, so z0 = (z_t − b_t·ε̂)/a_t never divides
        // the network's error by a small a_t
        let (w_out, w_skip, b_out) = (tape.param(p, d.w_out), tape.param(p, d.w_skip), tape.param(p, d.b_out));
        let o = tape.matmul(h, w_out);
        let o = tape.add_row(o, b_out);
        let o = tape.scale(o, self.schedule.a(t));
        let scaled = tape.scale(z_t, self.schedule.b(t));
        let skip = tape.matmul(scaled, w_skip);
        let eps_hat = tape.add(o, skip);
        Forward { eps_hat, f_t }
    }

    /// Emotion probabilities (`1 × N_e`) from frame features.
    pub fn discriminate_var(&self, tape: &mut Tape, f_t: Var) -> Var {
        let p = &self.params;
        let dsc = &self.discriminator;
        let pooled = tape.row_mean(f_t);
        let (w1, b1, w2, b2) = (tape.param(p, dsc.w1), tape.param(p, dsc.b1), tape.param(p, dsc.w2), tape.param(p, dsc.b2));
        let h = tape.matmul(pooled, w1);
        let h = tape.add_row(h, b1);
        let h = tape.silu(h);
        let logits = tape.matmul(h, w2);
        let logits = tape.add_row(logits, b2);
        tape.softmax_rows(logits)
    }

    /// Puts the condition tensors on the tape, substituting the null
    /// embedding for each flagged slot.
    pub fn condition_vars(&self, tape: &mut Tape, c: &ConditionSet) -> Result<(Var, Var, Var)> {
        self.check_row(&c.identity_embed, "identity embedding")?;
        self.check_row(&c.audio_seq, "audio sequence")?;
        self.check_row(&c.emotion.e_s, "emotion embedding")?;
        let identity = if c.drop.image {
            self.null_var(tape, NullSlot::Identity)
        } else {
            tape.leaf(c.identity_embed.clone())
        };
        let audio = if c.drop.audio {
            self.null_var(tape, NullSlot::Audio)
        } else {
            tape.leaf(c.audio_seq.clone())
        };
        let emotion = if c.drop.emotion || c.emotion.source == SourceMode::Null {
            self.null_var(tape, NullSlot::Emotion)
        } else {
            tape.leaf(c.emotion.e_s.clone())
        };
        Ok((identity, audio, emotion))
    }

    /// Predicted noise (same shape as `z_t`) and the discriminator features
    /// `f_t` (`F × d_model`).
    pub fn predict_noise(&self, z_t: &Tensor, conditions: &ConditionSet, t: usize) -> Result<(Tensor, Tensor)> {
        if t == 0 || t > self.schedule.timesteps {
            return Err(Error::argument(format!("timestep {t} outside [1, {}]", self.schedule.timesteps)));
        }
        let z = self.check_latent(z_t)?;
        let mut tape = Tape::new();
        let (identity, audio, emotion) = self.condition_vars(&mut tape, conditions)?;
        let zv = tape.leaf(z);
        let fw = self.forward_var(&mut tape, zv, t, identity, audio, emotion);
        let eps = tape.value(fw.eps_hat).clone().reshape(z_t.shape().to_vec())?;
        Ok((eps, tape.value(fw.f_t).clone()))
    }

    pub fn inject_emotion(&self, z_a: &Tensor, e_s: &Tensor) -> Result<Tensor> {
        if z_a.rank() != 2 || z_a.cols() != self.dims.d_model {
            return Err(Error::argument("z_a must be rows × d_model"));
        }
        if e_s.shape() != [1, self.dims.d_s] {
            return Err(Error::argument("E_s must be 1 × d_s"));
        }
        let mut tape = Tape::new();
        let z = tape.leaf(z_a.clone());
        let e = tape.leaf(e_s.clone());
        let out = self.inject_emotion_var(&mut tape, z, e);
        Ok(tape.value(out).clone())
    }

    pub fn discriminate(&self, f_t: &Tensor) -> Result<Vec<f64>> {
        if f_t.rank() != 2 || f_t.cols() != self.dims.d_model || !f_t.is_finite() {
            return Err(Error::argument("f_t must be a finite rows × d_model matrix"));
        }
        let mut tape = Tape::new();
        let f = tape.leaf(f_t.clone());
        let p = self.discriminate_var(&mut tape, f);
        Ok(tape.value(p).data().to_vec())
    }

    /// Emotion probabilities for a (nearly) clean latent, read at `t = 1`.
    pub fn classify_latent(&self, z0: &Tensor, identity_embed: &Tensor) -> Result<Vec<f64>> {
        let z = self.check_latent(z0)?;
        self.check_row(identity_embed, "identity embedding")?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let id = tape.leaf(identity_embed.clone());
        let f = self.features_var(&mut tape, zv, 1, id);
        let p = self.discriminate_var(&mut tape, f);
        Ok(tape.value(p).data().to_vec())
    }

    /// Emotion condition from a prior via full-bank attention.
    pub fn emotion_condition(&self, s: &[f64]) -> Result<ConditionEmbedding> {
        self.bank.attend_infer(&self.params, s)
    }

    /// Condition bundle with the null embedding written into every flagged slot.
    pub fn apply_drops(&self, mut c: ConditionSet) -> ConditionSet {
        if c.drop.image {
            c.identity_embed = self.null_value(NullSlot::Identity).clone();
        }
        if c.drop.audio {
            c.audio_seq = self.null_value(NullSlot::Audio).clone();
        }
        if c.drop.emotion {
            c.emotion = ConditionEmbedding { e_s: self.null_value(NullSlot::Emotion).clone(), source: SourceMode::Null };
        }
        c
    }

    /// Zeroes the output head (weights, skip weights and bias).
    pub fn zero_head(&mut self) {
        for id in [self.den.w_out, self.den.w_skip, self.den.b_out] {
            self.params.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    /// Zeroes the discriminator's classifier weights and biases.
    pub fn zero_discriminator(&mut self) {
        let d = &self.discriminator;
        for id in [d.w1, d.b1, d.w2, d.b2] {
            self.params.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = checkpoint::create(path)?;
        w.write_all(DIFFUSION_MAGIC)?;
        checkpoint::write_u32(&mut w, FORMAT_VERSION)?;
        checkpoint::write_u32(&mut w, SECTIONS.len() as u32 + 1)?;
        for (tag, prefix) in SECTIONS {
            w.write_all(tag)?;
            checkpoint::write_block(&mut w, &self.params, prefix)?;
        }
        w.write_all(SCHEDULE_TAG)?;
        let mut sched = ParamSet::new();
        let s = &self.schedule;
        sched.add(
            "schedule",
            Tensor::new(
                vec![4],
                vec![s.timesteps as f64, s.sampler_steps as f64, s.logsnr_max, s.logsnr_min],
            )?,
        )?;
        let dims = self.dims;
        sched.add(
            "dims",
            Tensor::new(vec![2], vec![dims.temb_dim as f64, dims.emotions as f64])?,
        )?;
        checkpoint::write_block(&mut w, &sched, "")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = checkpoint::open(path)?;
        checkpoint::read_magic(&mut r, DIFFUSION_MAGIC)?;
        checkpoint::read_version(&mut r)?;
        let count = checkpoint::read_u32(&mut r)?;
        let mut loaded = Vec::new();
        let mut schedule_block = None;
        for _ in 0..count {
            let mut tag = [0u8; 4];
            std::io::Read::read_exact(&mut r, &mut tag)?;
            let block = checkpoint::read_block(&mut r)?;
            if &tag == SCHEDULE_TAG {
                schedule_block = Some(block);
            } else if SECTIONS.iter().any(|(t, _)| *t == &tag) {
                loaded.extend(block);
            } else {
                return Err(Error::format(format!("unknown section {:?}", String::from_utf8_lossy(&tag))));
            }
        }
        let sb = schedule_block.ok_or_else(|| Error::format("checkpoint lacks a schedule section"))?;
        let sv = checkpoint::lookup(&sb, "schedule")?.data().to_vec();
        let dv = checkpoint::lookup(&sb, "dims")?.data().to_vec();
        let schedule = NoiseSchedule::new(sv[0] as usize, sv[1] as usize, sv[2], sv[3])?;
        let shape = |name: &str| checkpoint::lookup(&loaded, name).map(|t| t.shape().to_vec());
        let w_in = shape("den.w_in")?;
        let dims = ModelDims {
            latent_dim: w_in[0],
            d_model: w_in[1],
            d_s: shape("den.w_id")?[0],
            temb_dim: dv[0] as usize,
            ffn_hidden: shape("den.ff1")?[1],
            disc_hidden: shape("disc.w1")?[1],
            emotions: dv[1] as usize,
        };
        let bank_cfg = BankConfig { codes: shape("bank.codes")?[0], ..BankConfig::default() };
        let mut model = Self::new(dims, schedule, &bank_cfg, &mut crate::rng::seeded(0))?;
        if loaded.len() != model.params.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} parameters, model has {}",
                loaded.len(),
                model.params.len()
            )));
        }
        checkpoint::assign(&mut model.params, &loaded)?;
        Ok(model)
    }
}

const SECTIONS: [(&[u8; 4], &str); 4] = [(b"DNSR", "den."), (b"DCBK", "bank."), (b"DISC", "disc."), (b"NULL", "null.")];
const SCHEDULE_TAG: &[u8; 4] = b"SCHD";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullSlot {
    Audio,
    Identity,
    Emotion,
}

/// Builds an unconditioned bundle: every slot flagged and filled with its
/// null embedding.
pub fn null_conditions(model: &DiffusionModel, frames: usize) -> ConditionSet {
    let d_s = model.dims.d_s;
    model.apply_drops(ConditionSet {
        identity_embed: Tensor::zeros(&[1, d_s]),
        audio_seq: Tensor::zeros(&[frames, d_s]),
        emotion: ConditionEmbedding { e_s: Tensor::zeros(&[1, d_s]), source: SourceMode::Null },
        drop: DropFlags::ALL,
    })
}
