//! Subset-masked LM task episodes: N-way masked-word classification with
//! K support and Q query examples per class.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::PretokenizedCorpus;
use crate::data::vocab::{is_reserved, Vocab, MASK};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_ways: usize,
    pub k_shots: usize,
    pub q_queries: usize,
    /// Words present in at least this fraction of sequences are not eligible as classes.
    pub max_doc_freq: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { n_ways: 32, k_shots: 4, q_queries: 2, max_doc_freq: 0.2 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ways == 0 || self.k_shots == 0 || self.q_queries == 0 {
            return Err(Error::Config("n_ways, k_shots and q_queries must be positive".into()));
        }
        if !(self.max_doc_freq > 0.0 && self.max_doc_freq <= 1.0) {
            return Err(Error::Config("max_doc_freq must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeExample {
    pub tokens: Vec<u32>,
    pub label: usize,
    /// Every position that held the class word, ascending.
    pub mask_positions: Vec<usize>,
    /// Index of the underlying corpus sequence.
    pub source: usize,
}

impl EpisodeExample {
    /// Position whose hidden state represents the example.
    pub fn target_position(&self) -> usize {
        self.mask_positions[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_ways: usize,
    pub k_shots: usize,
    pub q_queries: usize,
    pub class_words: Vec<u32>,
    pub support: Vec<EpisodeExample>,
    pub query: Vec<EpisodeExample>,
}

/// All ids but the last of a packed sequence (the whole sequence if it has one id).
pub fn input_window(seq: &[u32]) -> &[u32] {
    if seq.len() > 1 {
        &seq[..seq.len() - 1]
    } else {
        seq
    }
}

/// Replaces every occurrence of `target` by `<mask>`.
pub fn mask_sentence(seq: &[u32], target: u32) -> Result<(Vec<u32>, Vec<usize>)> {
    let positions: Vec<usize> = seq.iter().enumerate().filter(|(_, &t)| t == target).map(|(i, _)| i).collect();
    if positions.is_empty() {
        return Err(Error::Sampling(format!("word {target} does not occur in the sequence")));
    }
    let masked = seq.iter().map(|&t| if t == target { MASK } else { t }).collect();
    Ok((masked, positions))
}

impl Episode {
    /// Structural invariants that hold independently of the source corpus.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Episode(m));
        if self.class_words.len() != self.n_ways {
            return bad(format!("{} class words for {} ways", self.class_words.len(), self.n_ways));
        }
        let distinct: HashSet<_> = self.class_words.iter().collect();
        if distinct.len() != self.n_ways {
            return bad("class words are not distinct".into());
        }
        if self.class_words.iter().any(|&w| is_reserved(w)) {
            return bad("a class word is a reserved id".into());
        }
        for (set, per, name) in [(&self.support, self.k_shots, "support"), (&self.query, self.q_queries, "query")] {
            let mut counts = vec![0usize; self.n_ways];
            for ex in set {
                if ex.label >= self.n_ways {
                    return bad(format!("{name} label {} out of range", ex.label));
                }
                counts[ex.label] += 1;
                if ex.mask_positions.is_empty() {
                    return bad(format!("{name} example without a masked position"));
                }
                if ex.mask_positions.iter().any(|&p| ex.tokens.get(p) != Some(&MASK)) {
                    return bad(format!("{name} mask position does not hold <mask>"));
                }
            }
            if counts.iter().any(|&c| c != per) {
                return bad(format!("{name} examples per class {counts:?}, expected {per}"));
            }
        }
        let support: HashSet<usize> = self.support.iter().map(|e| e.source).collect();
        if self.query.iter().any(|e| support.contains(&e.source)) {
            return bad("a sequence appears in both support and query".into());
        }
        Ok(())
    }

    /// Full check, including that each mask hid that example's class word.
    pub fn validate_against(&self, corpus: &PretokenizedCorpus) -> Result<()> {
        self.validate()?;
        for ex in self.support.iter().chain(&self.query) {
            let original = corpus
                .sequences()
                .get(ex.source)
                .ok_or_else(|| Error::Episode(format!("source {} outside corpus", ex.source)))?;
            let word = self.class_words[ex.label];
            for (i, (&o, &m)) in original.iter().zip(&ex.tokens).enumerate() {
                let masked = ex.mask_positions.binary_search(&i).is_ok();
                if masked != (o == word) || (!masked && o != m) {
                    return Err(Error::Episode(format!(
                        "position {i} of sequence {} masked inconsistently",
                        ex.source
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Word → sequence index table over a corpus, built once and reused.
pub struct EpisodeSampler<'c> {
    corpus: &'c PretokenizedCorpus,
    config: EpisodeConfig,
    postings: BTreeMap<u32, Vec<usize>>,
    eligible: Vec<u32>,
}

impl<'c> EpisodeSampler<'c> {
    /// Episodes use each sequence's model-input window (all ids but the last).
    pub fn new(corpus: &'c PretokenizedCorpus, config: EpisodeConfig) -> Result<Self> {
        config.validate()?;
        let mut postings: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, seq) in corpus.sequences().iter().enumerate() {
            let window = input_window(seq);
            let mut seen: Vec<u32> = window.iter().copied().filter(|&t| !is_reserved(t)).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                postings.entry(t).or_default().push(i);
            }
        }
        let need = config.k_shots + config.q_queries;
        let cap = config.max_doc_freq * corpus.len() as f64;
        let eligible = postings
            .iter()
            .filter(|(_, seqs)| seqs.len() >= need && (config.max_doc_freq >= 1.0 || (seqs.len() as f64) < cap))
            .map(|(&w, _)| w)
            .collect();
        Ok(Self { corpus, config, postings, eligible })
    }

    pub fn eligible_words(&self) -> &[u32] {
        &self.eligible
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Episode> {
        let cfg = &self.config;
        if self.eligible.len() < cfg.n_ways {
            return Err(Error::Episode(format!(
                "{} eligible words for a {}-way episode (deficit {})",
                self.eligible.len(),
                cfg.n_ways,
                cfg.n_ways - self.eligible.len()
            )));
        }
        let class_words: Vec<u32> =
            sample(rng, self.eligible.len(), cfg.n_ways).into_iter().map(|i| self.eligible[i]).collect();
        let need = cfg.k_shots + cfg.q_queries;
        let mut used: HashSet<usize> = HashSet::new();
        let (mut support, mut query) = (Vec::new(), Vec::new());
        for (label, &word) in class_words.iter().enumerate() {
            let free: Vec<usize> = self.postings[&word].iter().copied().filter(|s| !used.contains(s)).collect();
            if free.len() < need {
                return Err(Error::Episode(format!(
                    "word {word} has {} unused sequences, needs {need} (deficit {})",
                    free.len(),
                    need - free.len()
                )));
            }
            let picks = sample(rng, free.len(), need).into_vec();
            for (j, pick) in picks.into_iter().enumerate() {
                let source = free[pick];
                used.insert(source);
                let seq = &self.corpus.sequences()[source];
                let (tokens, mask_positions) = mask_sentence(input_window(seq), word)?;
                let ex = EpisodeExample { tokens, label, mask_positions, source };
                if j < cfg.k_shots {
                    support.push(ex);
                } else {
                    query.push(ex);
                }
            }
        }
        Ok(Episode { n_ways: cfg.n_ways, k_shots: cfg.k_shots, q_queries: cfg.q_queries, class_words, support, query })
    }
}

/// One-shot convenience: indexes `corpus` and samples a single episode.
pub fn sample_episode(
    corpus: &PretokenizedCorpus,
    vocab: &Vocab,
    n_ways: usize,
    k_shots: usize,
    q_queries: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let config = EpisodeConfig { n_ways, k_shots, q_queries, ..EpisodeConfig::default() };
    let sampler = EpisodeSampler::new(corpus, config)?;
    if let Some(&w) = sampler.eligible.iter().find(|&&w| w as usize >= vocab.len()) {
        return Err(Error::Vocabulary(format!("corpus id {w} outside vocabulary of {}", vocab.len())));
    }
    sampler.sample(rng)
}
