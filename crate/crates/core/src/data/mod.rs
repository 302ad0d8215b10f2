//! Vocabulary, corpora and synthetic data generators.

pub mod corpus;
pub mod ner;
pub mod synthetic;
pub mod vocab;

pub use corpus::{load_pretokenized, sample_lm_batch, sample_lm_indices, PretokenizedCorpus};
pub use ner::{
    gen_synthetic_ner, gen_synthetic_ner_with, is_valid_iob2, load_conll, parse_conll, write_conll, EntityType,
    NerDataset, SyntheticNerSpec, Tag, TaggedSentence, NUM_TAGS, PERSON_PARTICLES,
};
pub use synthetic::gen_synthetic_corpus;
pub use vocab::{build_vocab, is_reserved, Vocab, MASK, PAD, UNK};
