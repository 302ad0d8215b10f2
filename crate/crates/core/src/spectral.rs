//! Proportional effective rank of weight matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Singular values below this fraction of the largest are treated as zero.
pub const REL_CUTOFF: f64 = 1e-12;

/// Singular values of a 2-D tensor, descending, computed at f64.
pub fn singular_values<T: Real>(w: &Tensor<T>) -> Result<Vec<f64>> {
    if w.shape().len() != 2 {
        return Err(Error::shape(format!("singular values need a matrix, got shape {:?}", w.shape())));
    }
    if !w.is_finite() {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let m = DMatrix::from_row_iterator(r, c, w.data().iter().map(|v| v.f64()));
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// exp of the entropy of the normalised singular-value distribution, divided
/// by `max_rank`. `None` for a zero matrix.
pub fn effective_rank_from_singular_values(s: &[f64], max_rank: usize) -> Option<f64> {
    let max = s.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let kept: Vec<f64> = s.iter().copied().filter(|&v| v >= REL_CUTOFF * max).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept.iter().map(|&v| v / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    Some((entropy.exp() / max_rank as f64).min(1.0))
}

/// Proportional effective rank of a matrix: 1 for the identity, 1/min(m, n) at rank one.
pub fn effective_rank_proportional<T: Real>(w: &Tensor<T>) -> Result<Option<f64>> {
    let s = singular_values(w)?;
    Ok(effective_rank_from_singular_values(&s, w.shape()[0].min(w.shape()[1])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_full_rank() {
        let per = effective_rank_proportional(&Tensor::<f64>::eye(6)).unwrap().unwrap();
        assert!((per - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_and_zero() {
        let w = Tensor::<f64>::from_fn(&[4, 5], |i| ((i / 5) + 1) as f64 * ((i % 5) as f64 - 1.5));
        let per = effective_rank_proportional(&w).unwrap().unwrap();
        assert!((per - 0.25).abs() < 1e-9, "{per}");
        assert_eq!(effective_rank_proportional(&Tensor::<f64>::zeros(&[3, 3])).unwrap(), None);
    }

    #[test]
    fn two_unequal_values() {
        // σ = (3, 1): p = (0.75, 0.25).
        let per = effective_rank_from_singular_values(&[3.0, 1.0], 2).unwrap();
        let h: f64 = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((per - h.exp() / 2.0).abs() < 1e-15);
    }
}
