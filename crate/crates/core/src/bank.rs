//! Learnable emotion bank: a codebook of prototype vectors with bias-free
//! query/key/value projections, nearest-code retrieval, the VQ loss with
//! stop-gradient semantics, and the two attention modes (single retrieved
//! code during training, full bank at inference).
//!
//! The bank's parameters live in a caller-owned [`ParamSet`] so they can be
//! optimised jointly with the denoiser; [`EmotionBank`] only holds handles.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Number of codes `K`.
    pub codes: usize,
    /// Commitment weight of the VQ loss.
    pub beta: f64,
    /// Standard deviation of the initial codes.
    pub init_scale: f64,
    /// Re-seed a code after this many consecutive steps without use
    /// (0 disables re-seeding).
    pub dead_code_steps: usize,
    /// `W_Q` and `W_K` start as this multiple of the identity. The
    /// training-time path gives them no gradient, so their initial value is
    /// what full-bank attention uses at inference.
    pub qk_gain: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig { codes: 8, beta: 0.25, init_scale: 0.1, dead_code_steps: 200, qk_gain: 1.0 }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codes == 0 {
            return Err(Error::config("bank.codes must be positive"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("bank.beta must be positive"));
        }
        if !(self.init_scale > 0.0) || !self.qk_gain.is_finite() {
            return Err(Error::config("bank.init_scale must be positive and qk_gain finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceMode {
    TrainRetrieved,
    InferFullBank,
    Null,
}

/// Emotion condition token `E_s` (`1 × d_s`) and how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub e_s: Tensor,
    pub source: SourceMode,
}

/// Parameter handles for the codebook `C` (`K × d_s`) and the projections.
#[derive(Clone, Debug)]
pub struct EmotionBank {
    codes: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    k: usize,
    d_s: usize,
}

const PREFIX: &str = "bank.";

fn check_vec(s: &[f64], d: usize) -> Result<()> {
    if s.len() != d {
        return Err(Error::argument(format!("expected a vector of length {d}, got {}", s.len())));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite emotion vector"));
    }
    Ok(())
}

impl EmotionBank {
    /// Registers `bank.codes`, `bank.wq`, `bank.wk`, `bank.wv` in `params`.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, d_s: usize, cfg: &BankConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let gain_eye = Tensor::eye(d_s).map(|x| x * cfg.qk_gain);
        let codes = params.add("bank.codes", Tensor::randn(&[cfg.codes, d_s], cfg.init_scale, rng))?;
        let wq = params.add("bank.wq", gain_eye.clone())?;
        let wk = params.add("bank.wk", gain_eye)?;
        let wv = params.add("bank.wv", Tensor::randn(&[d_s, d_s], 1.0 / (d_s as f64).sqrt(), rng))?;
        Ok(EmotionBank { codes, wq, wk, wv, k: cfg.codes, d_s })
    }

    /// Re-attaches to the bank parameters of an existing set.
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let codes = params.id(&format!("{PREFIX}codes"))?;
        let shape = params.value(codes).shape().to_vec();
        Ok(EmotionBank {
            codes,
            wq: params.id(&format!("{PREFIX}wq"))?,
            wk: params.id(&format!("{PREFIX}wk"))?,
            wv: params.id(&format!("{PREFIX}wv"))?,
            k: shape[0],
            d_s: shape[1],
        })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn codes_id(&self) -> ParamId {
        self.codes
    }

    pub fn projection_ids(&self) -> [ParamId; 3] {
        [self.wq, self.wk, self.wv]
    }

    pub fn codes<'a>(&self, params: &'a ParamSet) -> &'a Tensor {
        params.value(self.codes)
    }

    /// Nearest code under squared Euclidean distance, lowest index on ties.
    pub fn retrieve(&self, params: &ParamSet, s: &[f64]) -> Result<(usize, Vec<f64>)> {
        check_vec(s, self.d_s)?;
        let codes = self.codes(params);
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d: f64 = codes.row(i).iter().zip(s).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok((best.0, codes.row(best.0).to_vec()))
    }

    /// Training-time attention: the query attends to the single retrieved
    /// code `s*`, taken as a gradient-blocked snapshot. Returns `E_s` and `k`.
    pub fn attend_train_var(&self, tape: &mut Tape, params: &ParamSet, s: Var) -> Result<(Var, usize)> {
        let (k, _) = self.retrieve(params, tape.value(s).data())?;
        let codes = tape.param(params, self.codes);
        let ck = tape.select_row(codes, k);
        let s_star = tape.stop_gradient(ck);
        let (wq, wk, wv) = (tape.param(params, self.wq), tape.param(params, self.wk), tape.param(params, self.wv));
        let q = tape.matmul(s, wq);
        let key = tape.matmul(s_star, wk);
        let value = tape.matmul(s_star, wv);
        Ok((tape.attention(q, key, value), k))
    }

    /// Inference-time attention of the query over every projected code.
    pub fn attend_infer_var(&self, tape: &mut Tape, params: &ParamSet, s: Var) -> Var {
        let codes = tape.param(params, self.codes);
        let (wq, wk, wv) = (tape.param(params, self.wq), tape.param(params, self.wk), tape.param(params, self.wv));
        let q = tape.matmul(s, wq);
        let keys = tape.matmul(codes, wk);
        let values = tape.matmul(codes, wv);
        tape.attention(q, keys, values)
    }

    /// `‖sg[s] − C_k‖² + β‖s − sg[C_k]‖²` for the retrieved index `k`.
    pub fn vq_loss_var(&self, tape: &mut Tape, params: &ParamSet, s: Var, k: usize, beta: f64) -> Var {
        let codes = tape.param(params, self.codes);
        let ck = tape.select_row(codes, k);
        let s_frozen = tape.stop_gradient(s);
        let ck_frozen = tape.stop_gradient(ck);
        let d1 = tape.sub(s_frozen, ck);
        let sq1 = tape.square(d1);
        let codebook = tape.sum(sq1);
        let d2 = tape.sub(s, ck_frozen);
        let sq2 = tape.square(d2);
        let commit = tape.sum(sq2);
        let commit = tape.scale(commit, beta);
        tape.add(codebook, commit)
    }

    pub fn attend_train(&self, params: &ParamSet, s: &[f64]) -> Result<ConditionEmbedding> {
        check_vec(s, self.d_s)?;
        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::row_vector(s.to_vec())?);
        let (e, _) = self.attend_train_var(&mut tape, params, sv)?;
        Ok(ConditionEmbedding { e_s: tape.value(e).clone(), source: SourceMode::TrainRetrieved })
    }

    pub fn attend_infer(&self, params: &ParamSet, s: &[f64]) -> Result<ConditionEmbedding> {
        check_vec(s, self.d_s)?;
        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::row_vector(s.to_vec())?);
        let e = self.attend_infer_var(&mut tape, params, sv);
        Ok(ConditionEmbedding { e_s: tape.value(e).clone(), source: SourceMode::InferFullBank })
    }

    pub fn vq_loss(&self, params: &ParamSet, s: &[f64], beta: f64) -> Result<f64> {
        check_vec(s, self.d_s)?;
        let (k, _) = self.retrieve(params, s)?;
        let mut tape = Tape::new();
        let sv = tape.leaf(Tensor::row_vector(s.to_vec())?);
        let l = self.vq_loss_var(&mut tape, params, sv, k, beta);
        Ok(tape.scalar(l))
    }

    /// Overwrites code `k` (used by dead-code re-seeding).
    pub fn set_code(&self, params: &mut ParamSet, k: usize, value: &[f64]) {
        let d = self.d_s;
        params.get_mut(self.codes).value.data_mut()[k * d..(k + 1) * d].copy_from_slice(value);
    }
}

/// Tracks code usage during training and re-seeds codes that went unused
/// for too long to one of the recently seen inputs.
#[derive(Clone, Debug)]
pub struct DeadCodeTracker {
    last_used: Vec<usize>,
    recent: VecDeque<Vec<f64>>,
    patience: usize,
    capacity: usize,
    pub reseeds: usize,
}

impl DeadCodeTracker {
    pub fn new(codes: usize, patience: usize) -> Self {
        DeadCodeTracker {
            last_used: vec![0; codes],
            recent: VecDeque::new(),
            patience,
            capacity: 256,
            reseeds: 0,
        }
    }

    pub fn observe(&mut self, step: usize, k: usize, s: &[f64]) {
        self.last_used[k] = step;
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(s.to_vec());
    }

    /// Codes to re-seed after `step`, each paired with its new value.
    pub fn expired<R: Rng + ?Sized>(&mut self, step: usize, rng: &mut R) -> Vec<(usize, Vec<f64>)> {
        if self.patience == 0 || self.recent.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for k in 0..self.last_used.len() {
            if step.saturating_sub(self.last_used[k]) >= self.patience {
                let pick = self.recent[rng.random_range(0..self.recent.len())].clone();
                self.last_used[k] = step;
                self.reseeds += 1;
                out.push((k, pick));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn bank_with(codes: Vec<Vec<f64>>) -> (EmotionBank, ParamSet) {
        let d = codes[0].len();
        let cfg = BankConfig { codes: codes.len(), ..Default::default() };
        let mut params = ParamSet::new();
        let bank = EmotionBank::new(&mut params, d, &cfg, &mut rng::seeded(0)).unwrap();
        params.get_mut(bank.codes).value = Tensor::from_rows(&codes).unwrap();
        (bank, params)
    }

    #[test]
    fn retrieval_examples() {
        let (bank, params) = bank_with(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(bank.retrieve(&params, &[0.9, 0.8]).unwrap().0, 1);
        let (bank, params) = bank_with(vec![vec![1.0, 0.0], vec![0.0, 5.0], vec![-1.0, 0.0]]);
        assert_eq!(bank.retrieve(&params, &[0.0, 0.0]).unwrap().0, 0);
    }

    #[test]
    fn vq_loss_value() {
        let (bank, params) = bank_with(vec![vec![0.0, 0.0]]);
        assert!((bank.vq_loss(&params, &[1.0, 0.0], 0.25).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn dead_codes_are_reseeded() {
        let mut t = DeadCodeTracker::new(3, 5);
        let mut r = rng::seeded(1);
        for step in 1..=10 {
            t.observe(step, 0, &[step as f64]);
            let fired = t.expired(step, &mut r);
            if step < 5 {
                assert!(fired.is_empty());
            }
        }
        assert_eq!(t.reseeds, 4);
    }
}
