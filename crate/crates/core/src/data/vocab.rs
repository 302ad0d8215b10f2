use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: u32 = 0;
pub const MASK: u32 = 1;
pub const PAD: u32 = 2;
pub const RESERVED: [&str; 3] = ["<unk>", "<mask>", "<pad>"];

/// Word-level vocabulary. Ids 0..3 are `<unk>`, `<mask>`, `<pad>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

pub fn is_reserved(id: u32) -> bool {
    (id as usize) < RESERVED.len()
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return Err(Error::Vocabulary(format!("the first ids must be {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Reserved tokens followed by `extra` in order.
    pub fn with_words<S: AsRef<str>>(extra: &[S]) -> Result<Self> {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(extra.iter().map(|s| s.as_ref().to_string()));
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Id of `word`, `<unk>` when absent.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i).unwrap_or(RESERVED[UNK as usize])).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.words)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let words: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_words(words)
    }
}

/// Most frequent `max_size − 3` whitespace words, ties broken lexicographically.
pub fn build_vocab(text: &str, max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED.len() {
        return Err(Error::Config(format!("vocabulary size must exceed {}", RESERVED.len())));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in text.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(w)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    let words: Vec<&str> = ranked.into_iter().map(|(w, _)| w).collect();
    Vocab::with_words(&words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = build_vocab("a b a", 5).unwrap();
        assert_eq!(v.words(), &["<unk>", "<mask>", "<pad>", "a", "b"]);
        let v = build_vocab("c b a b c", 5).unwrap();
        assert_eq!(&v.words()[3..], &["b", "c"]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = build_vocab("a b a", 5).unwrap();
        assert_eq!(v.encode("a zebra b"), vec![3, UNK, 4]);
    }

    #[test]
    fn deterministic_rebuild() {
        let text = "the cat sat on the mat while the dog sat";
        assert_eq!(build_vocab(text, 6).unwrap(), build_vocab(text, 6).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocab("  \n ", 10), Err(Error::Data(_))));
        assert!(build_vocab("a", 3).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = build_vocab("x y z x", 10).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        assert!(Vocab::from_words(vec!["a".into()]).is_err());
    }
}
