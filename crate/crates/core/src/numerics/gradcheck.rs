//! Central-difference gradient verification.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamSet, Tensor};

/// `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::argument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    Ok(())
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences and returns the worst relative error over all coordinates.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv);
    let grads = tape.gradients(out)?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = f(&mut tape, v);
        tape.scalar(out)
    };
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe);
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Gradient check over every coordinate of the selected parameters (all of
/// them when `only` is `None`). `f` must be deterministic: build any random
/// state inside the closure from a fixed seed.
pub fn grad_check_params<F>(
    mut f: F,
    params: &mut ParamSet,
    only: Option<&[ParamId]>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Var,
{
    check_eps(eps)?;
    params.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, params);
    tape.backward(out, params)?;

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.iter().map(|(id, _)| id).collect(),
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for id in ids {
        let analytic = params.grad(id).to_vec();
        for i in 0..analytic.len() {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = {
                let mut t = Tape::new();
                let o = f(&mut t, params);
                t.scalar(o)
            };
            params.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = {
                let mut t = Tape::new();
                let o = f(&mut t, params);
                t.scalar(o)
            };
            params.get_mut(id).value.data_mut()[i] = orig;
            let err = relative_error(analytic[i], (plus - minus) / (2.0 * eps));
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    params.zero_grad();
    Ok(report)
}
