//! Stand-in pretraining corpus: Zipfian filler words with a fixed successor
//! for every word, interleaved with particle-marked name phrases.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::corpus::PretokenizedCorpus;
use crate::data::ner::{synthetic_word_list, DIALECT_LEXICON, OBLIQUE, PERSON_PARTICLES, SOURCE_LEXICON, VERBS};
use crate::data::vocab::{Vocab, RESERVED};
use crate::error::{Error, Result};

/// Smallest number of filler words kept when the lexicon is embedded.
const MIN_FILLERS: usize = 16;
const PHRASE_RATE: f64 = 0.08;
const SUCCESSOR_RATE: f64 = 0.5;

pub fn gen_synthetic_corpus(
    vocab_size: usize,
    n_sequences: usize,
    seq_len: usize,
    rng: &mut impl Rng,
) -> Result<(PretokenizedCorpus, Vocab)> {
    if vocab_size <= RESERVED.len() + 1 || n_sequences == 0 || seq_len == 0 {
        return Err(Error::Config("synthetic corpus sizes must be positive (vocab > 4)".into()));
    }
    let lexicon = synthetic_word_list();
    let with_lexicon = vocab_size >= RESERVED.len() + lexicon.len() + MIN_FILLERS;
    let n_fill = vocab_size - RESERVED.len() - if with_lexicon { lexicon.len() } else { 0 };
    let mut words: Vec<String> = (0..n_fill).map(|i| format!("w{i}")).collect();
    if with_lexicon {
        words.extend(lexicon.iter().map(|s| s.to_string()));
    }
    let vocab = Vocab::with_words(&words)?;
    let filler_ids: Vec<u32> = (0..n_fill as u32).map(|i| i + RESERVED.len() as u32).collect();

    let zipf = WeightedIndex::new((0..n_fill).map(|r| 1.0 / (r as f64 + 1.0))).expect("positive weights");
    let mut successor = filler_ids.clone();
    successor.shuffle(rng);

    let id = |w: &str| vocab.id(w);
    let names: Vec<&str> = SOURCE_LEXICON.names.iter().chain(DIALECT_LEXICON.names).copied().collect();
    let places: Vec<&str> = SOURCE_LEXICON.places.iter().chain(DIALECT_LEXICON.places).copied().collect();

    let mut stream: Vec<u32> = Vec::with_capacity(n_sequences * seq_len + 8);
    let mut prev: Option<u32> = None;
    while stream.len() < n_sequences * seq_len {
        if with_lexicon && rng.random_bool(PHRASE_RATE) {
            stream.push(id(VERBS.choose(rng).unwrap()));
            if rng.random_bool(0.7) {
                stream.push(id(PERSON_PARTICLES.choose(rng).unwrap()));
            }
            stream.push(id(names.choose(rng).unwrap()));
            stream.push(id(OBLIQUE));
            stream.push(id(places.choose(rng).unwrap()));
            prev = None;
            continue;
        }
        let next = match prev {
            Some(p) if (p as usize) < RESERVED.len() + n_fill && rng.random_bool(SUCCESSOR_RATE) => {
                successor[p as usize - RESERVED.len()]
            }
            _ => filler_ids[zipf.sample(rng)],
        };
        stream.push(next);
        prev = Some(next);
    }
    stream.truncate(n_sequences * seq_len);
    let sequences = stream.chunks(seq_len).map(<[u32]>::to_vec).collect();
    Ok((PretokenizedCorpus::new(sequences)?, vocab))
}
