use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{param_err, Error, Result};

/// Largest relative disagreement between tape gradients and central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, measured per coordinate as
/// `|g_tape − g_fd| / max(1, |g_fd|)`.
///
/// `f` builds a scalar loss on the tape it is given from the bound
/// parameters. Perturbed evaluations replay every stop-gradient value captured
/// at the base point, so straight-through estimators are checked against the
/// surrogate they differentiate.
pub fn finite_diff_check<F>(mut f: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(param_err!("step h must be > 0"));
    }
    let mut tape = Tape::recording();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    check_finite(tape.value(loss).item())?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let frozen = tape.take_frozen();

    let mut eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::replaying(frozen.clone());
        let b = p.bind(&mut t);
        let l = f(&mut t, &b)?;
        let v = t.value(l).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for k in 0..params.get(i).numel() {
            let base = params.get(i).data()[k];
            work.get_mut(i).data_mut()[k] = base + h;
            let fp = eval(&work)?;
            work.get_mut(i).data_mut()[k] = base - h;
            let fm = eval(&work)?;
            work.get_mut(i).data_mut()[k] = base;
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic[i][k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}
