//! Per-token change in gold-tag surprisal between two tagged models.

use metapico_core::data::ner::TaggedSentence;
use metapico_core::{Error, Result, Tensor};
use metapico_ner::Tagger;

/// `−ln p_b(gold) − (−ln p_a(gold))` at every position, from two `[T × K]`
/// marginal tables. Negative values mean model b is more confident.
pub fn delta_from_marginals(a: &Tensor<f64>, b: &Tensor<f64>, gold: &[usize]) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.shape().first() != Some(&gold.len()) {
        return Err(Error::Shape(format!("marginals {:?} and {:?} for {} tokens", a.shape(), b.shape(), gold.len())));
    }
    Ok(gold.iter().enumerate().map(|(t, &y)| -b.row(t)[y].ln() + a.row(t)[y].ln()).collect())
}

pub fn delta_logprob(a: &Tagger, b: &Tagger, sentence: &TaggedSentence) -> Result<Vec<f64>> {
    if a.scheme != b.scheme {
        return Err(Error::Config("the two taggers use different tag schemes".into()));
    }
    let gold = a.scheme.indices(&sentence.tags);
    delta_from_marginals(&a.marginals(&sentence.words)?, &b.marginals(&sentence.words)?, &gold)
}
