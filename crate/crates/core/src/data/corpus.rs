use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-length packed id sequences (`max_seq_len + 1` ids each).
#[derive(Clone, Debug, PartialEq)]
pub struct PretokenizedCorpus {
    sequences: Vec<Vec<u32>>,
    source: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    ids: Vec<u32>,
}

impl PretokenizedCorpus {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        if let Some(first) = sequences.first() {
            if let Some(i) = sequences.iter().position(|s| s.len() != first.len()) {
                return Err(Error::Data(format!(
                    "sequence {i} has length {}, expected {}",
                    sequences[i].len(),
                    first.len()
                )));
            }
        }
        Ok(Self { sequences, source: None })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Splits off the last `n` sequences, e.g. as a held-out set.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let cut = self.sequences.len().saturating_sub(n);
        let tail = self.sequences.split_off(cut);
        let source = self.source.clone();
        (self, Self { sequences: tail, source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for s in &self.sequences {
            serde_json::to_writer(&mut w, &Line { ids: s.clone() })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `{"ids": [...]}` JSONL, validating ids against `vocab_size` and,
/// when given, every sequence against `seq_len`.
pub fn load_pretokenized(path: &Path, vocab_size: usize, seq_len: Option<usize>) -> Result<PretokenizedCorpus> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut sequences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if let Some(&bad) = parsed.ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Vocabulary(format!("line {lineno}: id {bad} >= vocab size {vocab_size}")));
        }
        let expect = seq_len.or_else(|| sequences.first().map(Vec::len));
        if let Some(n) = expect {
            if parsed.ids.len() != n {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {n} ids, found {}", parsed.ids.len()),
                });
            }
        }
        sequences.push(parsed.ids);
    }
    let mut corpus = PretokenizedCorpus::new(sequences)?;
    corpus.source = Some(path.to_path_buf());
    Ok(corpus)
}

/// Indices of a uniform with-replacement draw of `batch_size` sequences.
pub fn sample_lm_indices(corpus: &PretokenizedCorpus, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(!corpus.is_empty(), "cannot sample from an empty corpus");
    (0..batch_size).map(|_| rng.random_range(0..corpus.len())).collect()
}

pub fn sample_lm_batch(corpus: &PretokenizedCorpus, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<u32>> {
    sample_lm_indices(corpus, batch_size, rng).into_iter().map(|i| corpus.sequences[i].clone()).collect()
}
