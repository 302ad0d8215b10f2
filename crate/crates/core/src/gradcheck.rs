//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn eval(f: &impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.scalar(out)?;
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value {y} is not finite")));
    }
    Ok(y)
}

/// Max over coordinates of `|analytic − central| / (|central| + 1e-8)` for a
/// scalar function of one tensor.
pub fn finite_diff_check(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Config("finite difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v)?;
    let y = tape.scalar(out)?;
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value {y} is not finite")));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(v).unwrap_or(&zeros).to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Same check over every coordinate of every trainable parameter in `store`.
pub fn finite_diff_check_params(
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    store: &ParamStore<f64>,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Config("finite difference step must be positive".into()));
    }
    let value = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        let y = tape.scalar(out)?;
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function value {y} is not finite")));
        }
        Ok(y)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    for id in ids {
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
