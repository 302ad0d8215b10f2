//! Entity spans from BIO tags and exact-match precision/recall/F1.

use std::collections::{BTreeMap, BTreeSet};

use metapico_core::data::ner::{EntityType, Tag};
use metapico_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Inclusive word range carrying one entity type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub ty: EntityType,
}

impl Span {
    pub fn new(start: usize, end: usize, ty: EntityType) -> Self {
        Self { start, end, ty }
    }
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue an open `X`
/// span opens a new one.
pub fn spans_from_bio(tags: &[Tag]) -> BTreeSet<Span> {
    let mut out = BTreeSet::new();
    let mut open: Option<Span> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag.entity() {
            None => out.extend(open.take()),
            Some(ty) => match open.as_mut() {
                Some(s) if tag.is_inside() && s.ty == ty => s.end = i,
                _ => {
                    out.extend(open.take());
                    open = Some(Span::new(i, i, ty));
                }
            },
        }
    }
    out.extend(open);
    out
}

/// String-tag variant; unknown labels are a parse error naming the position.
pub fn spans_from_strs<S: AsRef<str>>(tags: &[S]) -> Result<BTreeSet<Span>> {
    let parsed = tags
        .iter()
        .enumerate()
        .map(|(i, t)| t.as_ref().parse::<Tag>().map_err(|msg| Error::Parse { line: i + 1, msg }))
        .collect::<Result<Vec<_>>>()?;
    Ok(spans_from_bio(&parsed))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl Prf {
    /// Counts to scores with every 0/0 read as 0.
    pub fn from_counts(tp: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(tp, n_pred), ratio(tp, n_gold));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self { p, r, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    /// Neither gold nor predicted spans of this type exist; the scores are the 0 convention.
    pub undefined: bool,
}

fn check_aligned<A, B>(pred: &[A], gold: &[B]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!("{} predicted sentences but {} gold sentences", pred.len(), gold.len())));
    }
    Ok(())
}

fn counts(pred: &[BTreeSet<Span>], gold: &[BTreeSet<Span>], keep: impl Fn(&Span) -> bool) -> (usize, usize, usize) {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        np += p.iter().filter(|s| keep(s)).count();
        ng += g.iter().filter(|s| keep(s)).count();
        tp += p.intersection(g).filter(|s| keep(s)).count();
    }
    (tp, np, ng)
}

/// Span-level exact match pooled over sentences.
pub fn micro_f1(pred: &[BTreeSet<Span>], gold: &[BTreeSet<Span>]) -> Result<Prf> {
    check_aligned(pred, gold)?;
    let (tp, np, ng) = counts(pred, gold, |_| true);
    Ok(Prf::from_counts(tp, np, ng))
}

pub fn per_type_f1(pred: &[BTreeSet<Span>], gold: &[BTreeSet<Span>]) -> Result<BTreeMap<EntityType, TypeScore>> {
    check_aligned(pred, gold)?;
    Ok(EntityType::ALL
        .iter()
        .map(|&ty| {
            let (tp, np, ng) = counts(pred, gold, |s| s.ty == ty);
            let Prf { p, r, f1 } = Prf::from_counts(tp, np, ng);
            (ty, TypeScore { p, r, f1, undefined: np == 0 && ng == 0 })
        })
        .collect())
}

/// Token-level alternative: a token is a hit when its predicted and gold
/// entity types agree and are not `O`.
pub fn token_f1(pred: &[Vec<Tag>], gold: &[Vec<Tag>], only: Option<EntityType>) -> Result<Prf> {
    check_aligned(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let keep = |t: &Tag| t.entity().is_some_and(|ty| only.is_none_or(|o| o == ty));
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Data(format!("sentence of {} predicted tags but {} gold tags", p.len(), g.len())));
        }
        for (a, b) in p.iter().zip(g) {
            np += usize::from(keep(a));
            ng += usize::from(keep(b));
            tp += usize::from(keep(a) && a.entity() == b.entity());
        }
    }
    Ok(Prf::from_counts(tp, np, ng))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    Span,
    Token,
}

/// Scores of one tagged dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub scoring: Scoring,
    pub micro: Prf,
    pub per_type: BTreeMap<String, TypeScore>,
    pub n_sentences: usize,
    pub n_gold_spans: usize,
    pub n_pred_spans: usize,
}

impl EvalScores {
    pub fn type_f1(&self, ty: EntityType) -> f64 {
        self.per_type.get(ty.as_str()).map_or(0.0, |s| s.f1)
    }
}

pub fn score_tags(pred: &[Vec<Tag>], gold: &[Vec<Tag>], scoring: Scoring) -> Result<EvalScores> {
    check_aligned(pred, gold)?;
    let ps: Vec<_> = pred.iter().map(|t| spans_from_bio(t)).collect();
    let gs: Vec<_> = gold.iter().map(|t| spans_from_bio(t)).collect();
    let (micro, per_type) = match scoring {
        Scoring::Span => (micro_f1(&ps, &gs)?, per_type_f1(&ps, &gs)?),
        Scoring::Token => {
            let mut per = BTreeMap::new();
            for ty in EntityType::ALL {
                let Prf { p, r, f1 } = token_f1(pred, gold, Some(ty))?;
                let seen = |ts: &[Vec<Tag>]| ts.iter().flatten().any(|t| t.entity() == Some(ty));
                per.insert(ty, TypeScore { p, r, f1, undefined: !seen(pred) && !seen(gold) });
            }
            (token_f1(pred, gold, None)?, per)
        }
    };
    Ok(EvalScores {
        scoring,
        micro,
        per_type: per_type.into_iter().map(|(t, s)| (t.as_str().to_string(), s)).collect(),
        n_sentences: pred.len(),
        n_gold_spans: gs.iter().map(BTreeSet::len).sum(),
        n_pred_spans: ps.iter().map(BTreeSet::len).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use EntityType::*;

    #[test]
    fn lenient_repair() {
        let s = spans_from_bio(&[Tag::BPer, Tag::IPer, Tag::ILoc]);
        assert_eq!(s, [Span::new(0, 1, Per), Span::new(2, 2, Loc)].into());
        assert!(spans_from_bio(&[Tag::O, Tag::O]).is_empty());
        assert_eq!(spans_from_bio(&[Tag::O, Tag::IOrg, Tag::IOrg]), [Span::new(1, 2, Org)].into());
        assert!(matches!(spans_from_strs(&["O", "B-MISC"]), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn hand_counts() {
        let gold = vec![[Span::new(0, 0, Per), Span::new(2, 3, Loc)].into()];
        let pred = vec![[Span::new(0, 0, Per), Span::new(2, 2, Loc)].into()];
        let m = micro_f1(&pred, &gold).unwrap();
        assert_eq!((m.p, m.r, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(micro_f1(&gold, &gold).unwrap(), Prf { p: 1.0, r: 1.0, f1: 1.0 });
        assert_eq!(micro_f1(&[BTreeSet::new()], &gold).unwrap(), Prf::default());
        assert!(matches!(micro_f1(&pred, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn per_type_conventions() {
        let gold = vec![[Span::new(0, 0, Per), Span::new(2, 2, Loc)].into()];
        let pred = vec![[Span::new(0, 0, Per)].into()];
        let t = per_type_f1(&pred, &gold).unwrap();
        assert_eq!(t[&Per].f1, 1.0);
        assert_eq!(t[&Loc].f1, 0.0);
        assert!(!t[&Loc].undefined);
        assert_eq!(t[&Org].f1, 0.0);
        assert!(t[&Org].undefined);
    }

    #[test]
    fn token_level_scoring() {
        let gold = vec![vec![Tag::BPer, Tag::IPer, Tag::O]];
        let pred = vec![vec![Tag::BPer, Tag::O, Tag::O]];
        let t = token_f1(&pred, &gold, None).unwrap();
        assert_eq!((t.p, t.r), (1.0, 0.5));
        let s = score_tags(&pred, &gold, Scoring::Token).unwrap();
        assert_eq!(s.micro, t);
        assert_eq!(score_tags(&pred, &gold, Scoring::Span).unwrap().micro.f1, 0.0);
    }
}
