use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{self, EMBEDDER_MAGIC, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::synthdata::{ClipRecord, FeatureSequence};

use super::EmbedderConfig;

#[derive(Clone, Debug)]
struct AudioLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff1: ParamId,
    ff2: ParamId,
}

#[derive(Clone, Debug)]
struct FusionLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    lambda: ParamId,
}

/// Visual projection, audio transformer stack, cross-modal fusion layers and
/// the attention-pooling vector, all in one parameter set.
#[derive(Clone, Debug)]
pub struct EmbedderModel {
    pub params: ParamSet,
    d_raw: usize,
    d_s: usize,
    visual_w: ParamId,
    visual_b: ParamId,
    audio_in_w: ParamId,
    audio_in_b: ParamId,
    audio: Vec<AudioLayer>,
    fusion: Vec<FusionLayer>,
    pool: ParamId,
}

/// Tape handles for a clip's two feature streams (`N × d_s` each).
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub s_alpha: Var,
    pub s_beta: Var,
}

/// Tape handles for the Gaussian emotion prior of one clip.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub weights: Var,
    pub mu: Var,
    pub sigma2: Var,
    pub sample: Var,
}

/// Gaussian emotion representation of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionPrior {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sample: Vec<f64>,
}

impl EmotionPrior {
    /// Prior with the given moments and `sample = mu + sqrt(sigma2) ⊙ eps`.
    pub fn from_moments(mu: Vec<f64>, sigma2: Vec<f64>, eps: &[f64]) -> Self {
        let sample = mu
            .iter()
            .zip(&sigma2)
            .zip(eps)
            .map(|((m, s), e)| m + s.max(0.0).sqrt() * e)
            .collect();
        EmotionPrior { mu, sigma2, sample }
    }
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], gain / (rows as f64).sqrt(), rng)
}

impl EmbedderModel {
    pub fn new<R: Rng + ?Sized>(d_raw: usize, cfg: &EmbedderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_s;
        let h = cfg.ffn_hidden;
        let mut p = ParamSet::new();
        let visual_w = p.add("vis.w", xavier(d_raw, d, 1.0, rng))?;
        let visual_b = p.add("vis.b", Tensor::zeros(&[1, d]))?;
        let audio_in_w = p.add("aud.in_w", xavier(d_raw, d, 1.0, rng))?;
        let audio_in_b = p.add("aud.in_b", Tensor::zeros(&[1, d]))?;
        let mut audio = Vec::new();
        for l in 0..cfg.audio_layers {
            audio.push(AudioLayer {
                wq: p.add(&format!("aud.{l}.wq"), xavier(d, d, 1.0, rng))?,
                wk: p.add(&format!("aud.{l}.wk"), xavier(d, d, 1.0, rng))?,
                wv: p.add(&format!("aud.{l}.wv"), xavier(d, d, 1.0, rng))?,
                wo: p.add(&format!("aud.{l}.wo"), xavier(d, d, 0.5, rng))?,
                ff1: p.add(&format!("aud.{l}.ff1"), xavier(d, h, 1.0, rng))?,
                ff2: p.add(&format!("aud.{l}.ff2"), xavier(h, d, 0.5, rng))?,
            });
        }
        let mut fusion = Vec::new();
        for l in 0..cfg.fusion_layers {
            fusion.push(FusionLayer {
                wq: p.add(&format!("fuse.{l}.wq"), xavier(d, d, 1.0, rng))?,
                wk: p.add(&format!("fuse.{l}.wk"), xavier(d, d, 1.0, rng))?,
                wv: p.add(&format!("fuse.{l}.wv"), xavier(d, d, 1.0, rng))?,
                lambda: p.add(&format!("fuse.{l}.lambda"), Tensor::scalar(cfg.lambda_fuse_init))?,
            });
        }
        let pool = p.add("agg.ws", Tensor::randn(&[1, d], 0.1, rng))?;
        Ok(EmbedderModel {
            params: p,
            d_raw,
            d_s: d,
            visual_w,
            visual_b,
            audio_in_w,
            audio_in_b,
            audio,
            fusion,
            pool,
        })
    }

    /// Rebuilds the layer structure from parameter names and shapes.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let visual_w = params.id("vis.w")?;
        let (d_raw, d_s) = {
            let s = params.value(visual_w).shape();
            (s[0], s[1])
        };
        let count = |prefix: &str, suffix: &str| {
            (0..)
                .take_while(|l| params.id(&format!("{prefix}.{l}.{suffix}")).is_ok())
                .count()
        };
        let audio = (0..count("aud", "wq"))
            .map(|l| {
                Ok(AudioLayer {
                    wq: params.id(&format!("aud.{l}.wq"))?,
                    wk: params.id(&format!("aud.{l}.wk"))?,
                    wv: params.id(&format!("aud.{l}.wv"))?,
                    wo: params.id(&format!("aud.{l}.wo"))?,
                    ff1: params.id(&format!("aud.{l}.ff1"))?,
                    ff2: params.id(&format!("aud.{l}.ff2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = (0..count("fuse", "wq"))
            .map(|l| {
                Ok(FusionLayer {
                    wq: params.id(&format!("fuse.{l}.wq"))?,
                    wk: params.id(&format!("fuse.{l}.wk"))?,
                    wv: params.id(&format!("fuse.{l}.wv"))?,
                    lambda: params.id(&format!("fuse.{l}.lambda"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbedderModel {
            visual_b: params.id("vis.b")?,
            audio_in_w: params.id("aud.in_w")?,
            audio_in_b: params.id("aud.in_b")?,
            pool: params.id("agg.ws")?,
            params,
            d_raw,
            d_s,
            visual_w,
            audio,
            fusion,
        })
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn fusion_layers(&self) -> usize {
        self.fusion.len()
    }

    /// Sets the visual projection to the identity map (requires `d_raw == d_s`).
    pub fn set_visual_identity(&mut self) -> Result<()> {
        if self.d_raw != self.d_s {
            return Err(Error::argument("identity projection needs d_raw == d_s"));
        }
        self.params.get_mut(self.visual_w).value.data_mut().copy_from_slice(Tensor::eye(self.d_s).data());
        self.params.get_mut(self.visual_b).value.data_mut().fill(0.0);
        Ok(())
    }

    pub fn set_lambda(&mut self, value: f64) {
        for f in &self.fusion {
            self.params.get_mut(f.lambda).value.data_mut()[0] = value;
        }
    }

    pub fn set_pool(&mut self, ws: &[f64]) {
        self.params.get_mut(self.pool).value.data_mut().copy_from_slice(ws);
    }

    fn check_stream(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.frames.rank() != 2 || seq.frames.cols() != self.d_raw {
            return Err(Error::data(format!(
                "{:?} features have shape {:?}, expected N × {}",
                seq.modality,
                seq.frames.shape(),
                self.d_raw
            )));
        }
        Ok(())
    }

    /// Encodes both streams of a clip. A dropped stream becomes an all-zero
    /// `N × d_s` matrix.
    pub fn encode(&self, tape: &mut Tape, clip: &ClipRecord) -> Result<Encoded> {
        self.check_stream(&clip.visual)?;
        self.check_stream(&clip.audio)?;
        let n = clip.visual.len();
        if clip.audio.len() != n {
            return Err(Error::data(format!(
                "clip {}: {} visual frames vs {} audio frames",
                clip.clip_id,
                n,
                clip.audio.len()
            )));
        }
        let s_beta = if clip.visual.dropped {
            tape.leaf(Tensor::zeros(&[n, self.d_s]))
        } else {
            let x = tape.leaf(clip.visual.frames.clone());
            let w = tape.param(&self.params, self.visual_w);
            let b = tape.param(&self.params, self.visual_b);
            let xw = tape.matmul(x, w);
            tape.add_row(xw, b)
        };
        let s_alpha = if clip.audio.dropped {
            tape.leaf(Tensor::zeros(&[n, self.d_s]))
        } else {
            let x = tape.leaf(clip.audio.frames.clone());
            self.audio_stack(tape, x)
        };
        Ok(Encoded { s_alpha, s_beta })
    }

    fn audio_stack(&self, tape: &mut Tape, x: Var) -> Var {
        let p = &self.params;
        let w = tape.param(p, self.audio_in_w);
        let b = tape.param(p, self.audio_in_b);
        let xw = tape.matmul(x, w);
        let mut h = tape.add_row(xw, b);
        for layer in &self.audio {
            let n = tape.rms_norm_rows(h);
            let (wq, wk, wv, wo) = (
                tape.param(p, layer.wq),
                tape.param(p, layer.wk),
                tape.param(p, layer.wv),
                tape.param(p, layer.wo),
            );
            let q = tape.matmul(n, wq);
            let k = tape.matmul(n, wk);
            let v = tape.matmul(n, wv);
            let a = tape.attention(q, k, v);
            let a = tape.matmul(a, wo);
            h = tape.add(h, a);
            let n = tape.rms_norm_rows(h);
            let (f1, f2) = (tape.param(p, layer.ff1), tape.param(p, layer.ff2));
            let u = tape.matmul(n, f1);
            let u = tape.silu(u);
            let u = tape.matmul(u, f2);
            h = tape.add(h, u);
        }
        h
    }

    /// Residual cross-attention of the audio stream onto the visual stream,
    /// applied layer by layer: `s ← s + λ·CA(s W_Q, s_β W_K, s_β W_V)`.
    pub fn fuse(&self, tape: &mut Tape, s_alpha: Var, s_beta: Var) -> Var {
        let p = &self.params;
        let mut s = s_alpha;
        for layer in &self.fusion {
            let (wq, wk, wv, lambda) = (
                tape.param(p, layer.wq),
                tape.param(p, layer.wk),
                tape.param(p, layer.wv),
                tape.param(p, layer.lambda),
            );
            let q = tape.matmul(s, wq);
            let k = tape.matmul(s_beta, wk);
            let v = tape.matmul(s_beta, wv);
            let ca = tape.attention(q, k, v);
            let scaled = tape.scale_by(ca, lambda);
            s = tape.add(s, scaled);
        }
        s
    }

    /// Attention-weighted moments over frames and a reparameterised sample
    /// `mu + sqrt(sigma2) ⊙ eps`. With `eps = None` the sample is `mu`.
    pub fn aggregate(&self, tape: &mut Tape, s_hat: Var, eps: Option<&[f64]>) -> Result<PriorVars> {
        let n = tape.value(s_hat).rows();
        if n == 0 || tape.value(s_hat).cols() != self.d_s {
            return Err(Error::data("aggregate needs at least one frame of width d_s"));
        }
        let ws = tape.param(&self.params, self.pool);
        let logits = tape.matmul_bt(ws, s_hat);
        let weights = tape.softmax_rows(logits);
        let mu = tape.matmul(weights, s_hat);
        let neg_mu = tape.scale(mu, -1.0);
        let dev = tape.add_row(s_hat, neg_mu);
        let sq = tape.square(dev);
        let sigma2 = tape.matmul(weights, sq);
        let sample = match eps {
            Some(e) => {
                if e.len() != self.d_s {
                    return Err(Error::argument("eps length must equal d_s"));
                }
                let sigma = tape.sqrt(sigma2);
                let e = tape.leaf(Tensor::row_vector(e.to_vec())?);
                let noise = tape.mul(sigma, e);
                tape.add(mu, noise)
            }
            None => mu,
        };
        Ok(PriorVars { weights, mu, sigma2, sample })
    }

    /// Full forward pass for one clip: encode, fuse, aggregate.
    pub fn prior_vars(&self, tape: &mut Tape, clip: &ClipRecord, eps: Option<&[f64]>) -> Result<PriorVars> {
        let enc = self.encode(tape, clip)?;
        let fused = self.fuse(tape, enc.s_alpha, enc.s_beta);
        self.aggregate(tape, fused, eps)
    }

    /// Emotion prior of a clip with the given standard-normal draw.
    pub fn prior(&self, clip: &ClipRecord, eps: &[f64]) -> Result<EmotionPrior> {
        let mut tape = Tape::new();
        let vars = self.prior_vars(&mut tape, clip, None)?;
        Ok(EmotionPrior::from_moments(
            tape.value(vars.mu).data().to_vec(),
            tape.value(vars.sigma2).data().to_vec(),
            eps,
        ))
    }

    /// Audio-stream features (`N × d_s`) without fusion; these serve as the
    /// denoiser's audio condition.
    pub fn audio_features(&self, clip: &ClipRecord) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, clip)?;
        Ok(tape.value(enc.s_alpha).clone())
    }

    /// Visual projection of a single raw frame.
    pub fn project_visual(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.d_raw {
            return Err(Error::argument("frame width must equal d_raw"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(frame.to_vec())?);
        let w = tape.param(&self.params, self.visual_w);
        let b = tape.param(&self.params, self.visual_b);
        let xw = tape.matmul(x, w);
        let out = tape.add_row(xw, b);
        Ok(tape.value(out).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = checkpoint::create(path)?;
        w.write_all(EMBEDDER_MAGIC)?;
        checkpoint::write_u32(&mut w, FORMAT_VERSION)?;
        checkpoint::write_block(&mut w, &self.params, "")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = checkpoint::open(path)?;
        checkpoint::read_magic(&mut r, EMBEDDER_MAGIC)?;
        checkpoint::read_version(&mut r)?;
        let block = checkpoint::read_block(&mut r)?;
        let mut params = ParamSet::new();
        for (name, t) in block {
            params.add(&name, t)?;
        }
        Self::from_params(params)
    }
}
