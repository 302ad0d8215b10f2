//! Proportional effective rank of the monitored decoder matrices.

use std::collections::BTreeMap;

use metapico_core::model::Decoder;
use metapico_core::{ParamStore, Real, Result};

pub use metapico_core::spectral::{effective_rank_proportional, singular_values};

/// Proportional effective rank of the three attention and three feed-forward
/// matrices of the last layer, keyed by short name. `None` for a zero matrix.
pub fn decoder_spectra<T: Real>(decoder: &Decoder, store: &ParamStore<T>) -> Result<BTreeMap<String, Option<f64>>> {
    decoder
        .monitored_matrices()
        .into_iter()
        .map(|(name, id)| Ok((name.to_string(), effective_rank_proportional(store.get(id))?)))
        .collect()
}
