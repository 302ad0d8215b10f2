use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { betas: [0.9, 0.999], eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment buffers, one pair per parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One decoupled-weight-decay Adam update over every parameter holding a
/// gradient. Parameters without a gradient are left untouched.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    if state.m.len() != ids.len() {
        return Err(Error::shape(format!("optimizer tracks {} tensors, store has {}", state.m.len(), ids.len())));
    }
    for &id in &ids {
        if let Some(g) = store.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in {}", store.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.betas[0]), T::of(cfg.betas[1]));
    let bc1 = T::of(1.0 - cfg.betas[0].powi(t));
    let bc2 = T::of(1.0 - cfg.betas[1].powi(t));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for id in ids {
        let Some(g) = store.get(id).grad().map(<[T]>::to_vec) else { continue };
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        if m.len() != g.len() {
            return Err(Error::shape(format!("moment buffer size mismatch for {}", store.name(id))));
        }
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            p[i] *= decay;
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
