use crate::error::{Error, Result};
use crate::numerics::{norm, Tape, Tensor, Var};

/// InfoNCE on the tape with cosine similarity:
/// `−log(ω(p) / (ω(p) + Σ ω(n)))`, `ω(x) = exp(cos(a, x) / τ)`.
///
/// Cosine uses a norm floor, so zero vectors are tolerated here.
pub fn info_nce_var(tape: &mut Tape, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Var {
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(tape.cosine(anchor, positive));
    for &n in negatives {
        sims.push(tape.cosine(anchor, n));
    }
    let column = tape.concat_rows(&sims);
    let logits = tape.transpose(column);
    let logits = tape.scale(logits, 1.0 / tau);
    let probs = tape.softmax_rows(logits);
    let p = tape.pick(probs, 0);
    let lp = tape.ln(p);
    tape.scale(lp, -1.0)
}

/// InfoNCE loss of one anchor against a positive and a set of negatives.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::argument(format!("temperature must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(Error::argument("info_nce needs at least one negative"));
    }
    let d = anchor.len();
    let all = std::iter::once(anchor).chain(std::iter::once(positive)).chain(negatives.iter().map(Vec::as_slice));
    for v in all {
        if v.len() != d || d == 0 {
            return Err(Error::argument("info_nce vectors must share a non-zero length"));
        }
        if norm(v) == 0.0 {
            return Err(Error::numeric("cosine similarity undefined for a zero-norm vector"));
        }
    }
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::row_vector(anchor.to_vec())?);
    let p = tape.leaf(Tensor::row_vector(positive.to_vec())?);
    let ns = negatives
        .iter()
        .map(|n| Ok(tape.leaf(Tensor::row_vector(n.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let loss = info_nce_var(&mut tape, a, p, &ns, tau);
    Ok(tape.scalar(loss))
}
