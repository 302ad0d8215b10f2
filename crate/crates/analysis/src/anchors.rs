//! Dataset statistics tied to linguistic anchors: person-particle recall and OOV rate.

use metapico_core::data::ner::{EntityType, NerDataset, PERSON_PARTICLES};
use metapico_core::data::Vocab;
use metapico_core::{Error, Result};
use metapico_ner::spans_from_bio;

pub fn default_particles() -> Vec<String> {
    PERSON_PARTICLES.iter().map(|s| s.to_string()).collect()
}

/// Fraction of gold PER spans whose preceding word, lowercased, is in
/// `particles`. Sentence-initial spans count as misses. `None` without PER spans.
pub fn particle_recall<S: AsRef<str>>(data: &NerDataset, particles: &[S]) -> Option<f64> {
    let set: Vec<String> = particles.iter().map(|p| p.as_ref().to_lowercase()).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for s in &data.sentences {
        for span in spans_from_bio(&s.tags).into_iter().filter(|sp| sp.ty == EntityType::Per) {
            total += 1;
            let prev = span.start.checked_sub(1).map(|i| s.words[i].to_lowercase());
            hits += usize::from(prev.is_some_and(|w| set.contains(&w)));
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Fraction of word tokens (not types) missing from `vocab`.
pub fn oov_rate(data: &NerDataset, vocab: &Vocab) -> Result<f64> {
    let total = data.num_tokens();
    if total == 0 {
        return Err(Error::Data(format!("dataset {} has no tokens", data.id)));
    }
    let missing = data.sentences.iter().flat_map(|s| &s.words).filter(|w| !vocab.contains(w)).count();
    Ok(missing as f64 / total as f64)
}
