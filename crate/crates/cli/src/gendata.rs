use std::fs;

use log::info;
use metapico_core::data::{gen_synthetic_corpus, gen_synthetic_ner_with, write_conll, SyntheticNerSpec};
use metapico_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::VOCAB_FILE;
use crate::{GenDataKind, LexiconArg};

pub const CORPUS_FILE: &str = "corpus.jsonl";

pub fn run(kind: &GenDataKind) -> Result<()> {
    match kind {
        GenDataKind::Corpus { vocab_size, sequences, seq_len, seed, out } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let (corpus, vocab) = gen_synthetic_corpus(*vocab_size, *sequences, *seq_len, &mut rng)?;
            fs::create_dir_all(out)?;
            corpus.save(&out.join(CORPUS_FILE))?;
            vocab.save(&out.join(VOCAB_FILE))?;
            info!("wrote {} sequences of {seq_len} ids to {}", corpus.len(), out.display());
        }
        GenDataKind::Ner { sentences, particle_rate, lexicon, seed, out } => {
            let spec = match lexicon {
                LexiconArg::Source => SyntheticNerSpec::source(*particle_rate),
                LexiconArg::Dialect => SyntheticNerSpec::dialect(*particle_rate),
            };
            let data = gen_synthetic_ner_with(*sentences, &spec, &mut ChaCha8Rng::seed_from_u64(*seed))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_conll(&data, out)?;
            info!("wrote {} sentences to {}", data.len(), out.display());
        }
    }
    Ok(())
}
