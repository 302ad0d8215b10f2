//! Per-word confidence in the gold tag across checkpoints.

use std::collections::{BTreeMap, BTreeSet};

use metapico_core::data::ner::NerDataset;
use metapico_core::{Error, Result};
use metapico_ner::{spans_from_bio, Tagger};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// The word occurs inside at least one gold entity span.
    Entity,
    NonEntity,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Entity => "entity",
            Split::NonEntity => "non_entity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSeries {
    pub word: String,
    pub split: Split,
    pub count: usize,
    /// `(checkpoint step, mean p(gold tag))` per checkpoint, in input order.
    pub values: Vec<(usize, f64)>,
}

/// The `top_n` most frequent surface words of each split, by descending
/// count then ascending word.
pub fn top_words(data: &NerDataset, top_n: usize) -> BTreeMap<Split, Vec<(String, usize)>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut entity: BTreeSet<&str> = BTreeSet::new();
    for s in &data.sentences {
        for w in &s.words {
            *counts.entry(w).or_default() += 1;
        }
        for span in spans_from_bio(&s.tags) {
            entity.extend(s.words[span.start..=span.end].iter().map(String::as_str));
        }
    }
    let mut out = BTreeMap::new();
    for split in [Split::Entity, Split::NonEntity] {
        let mut ws: Vec<(String, usize)> = counts
            .iter()
            .filter(|(w, _)| entity.contains(*w) == (split == Split::Entity))
            .map(|(w, &c)| (w.to_string(), c))
            .collect();
        ws.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ws.truncate(top_n);
        out.insert(split, ws);
    }
    out
}

/// For every selected word, the mean CRF marginal of the gold tag over the
/// word's occurrences, under each `(step, tuned tagger)` pair.
pub fn token_confidence_series(
    taggers: &[(usize, &Tagger)],
    data: &NerDataset,
    top_n: usize,
) -> Result<Vec<ConfidenceSeries>> {
    if taggers.is_empty() {
        return Err(Error::Data("no tuned checkpoints to read confidences from".into()));
    }
    let selected = top_words(data, top_n);
    let mut series: Vec<ConfidenceSeries> = selected
        .iter()
        .flat_map(|(&split, ws)| {
            ws.iter().map(move |(w, c)| ConfidenceSeries { word: w.clone(), split, count: *c, values: Vec::new() })
        })
        .collect();
    let index: BTreeMap<String, usize> = series.iter().enumerate().map(|(i, s)| (s.word.clone(), i)).collect();
    for &(step, tagger) in taggers {
        let mut sums = vec![0.0; series.len()];
        let mut ns = vec![0usize; series.len()];
        for s in &data.sentences {
            let conf = tagger.gold_confidence(s)?;
            for (w, p) in s.words.iter().zip(conf) {
                if let Some(&i) = index.get(w) {
                    sums[i] += p;
                    ns[i] += 1;
                }
            }
        }
        for (i, ser) in series.iter_mut().enumerate() {
            ser.values.push((step, sums[i] / ns[i] as f64));
        }
    }
    Ok(series)
}

/// Long-format rows `word,checkpoint_step,split,confidence`, quoted where needed.
pub fn confidence_csv(series: &[ConfidenceSeries]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "checkpoint_step", "split", "confidence"]).expect("in-memory write");
    for s in series {
        for (step, c) in &s.values {
            w.write_record([s.word.clone(), step.to_string(), s.split.as_str().to_string(), c.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}
