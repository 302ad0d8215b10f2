//! Finetuning a CRF head on a pretrained backbone and zero-shot evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use metapico_core::data::ner::{NerDataset, Tag};
use metapico_core::data::Vocab;
use metapico_core::train::{adamw_step, AdamWConfig, OptimizerState};
use metapico_core::{backward, Error, Result, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scheme::TagScheme;
use crate::spans::{score_tags, EvalScores, Scoring};
use crate::tagger::{Backbone, Tagger};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Backbone frozen; only the CRF head trains.
    #[default]
    HeadOnly,
    Full,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" | "head_only" => Ok(Regime::HeadOnly),
            "full" => Ok(Regime::Full),
            other => Err(Error::Config(format!("unknown regime {other:?} (expected head or full)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::HeadOnly => "head_only",
            Regime::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub lr: f64,
    pub max_epochs: usize,
    /// Consecutive epochs without a dev-F1 improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub source: String,
    pub eval: Vec<String>,
    /// Decode with the IOB2 transition constraint.
    pub constrained: bool,
    pub scoring: Scoring,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            regime: Regime::HeadOnly,
            lr: 3e-5,
            max_epochs: 10,
            patience: 2,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
            source: "source".into(),
            eval: Vec::new(),
            constrained: true,
            scoring: Scoring::Span,
        }
    }
}

impl FinetuneConfig {
    /// Desk-scale settings: a fresh head on a 16-wide backbone needs a far
    /// larger step than the full-scale rate to move within ten epochs.
    pub fn desk() -> Self {
        Self { lr: 1e-2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs, batch_size and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid lr {} or weight decay {}", self.lr, self.weight_decay)));
        }
        Ok(())
    }
}

/// Stops once dev F1 has failed to improve for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: None, stale: 0 }
    }

    /// Records one epoch's score; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// Every dataset id consumed by an optimizer, by model selection, or by evaluation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAudit {
    pub optimizer: BTreeSet<String>,
    pub selection: BTreeSet<String>,
    pub evaluation: BTreeSet<String>,
}

impl DataAudit {
    /// Fails when an evaluated dataset was ever passed to an optimizer.
    pub fn check_zero_shot(&self) -> Result<()> {
        match self.evaluation.intersection(&self.optimizer).next() {
            Some(id) => Err(Error::Data(format!("dataset {id} was used for both training and evaluation"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub checkpoint_step: Option<usize>,
    pub regime: Option<Regime>,
    pub seed: Option<u64>,
    pub constrained: bool,
    pub scoring: Scoring,
    pub datasets: BTreeMap<String, EvalScores>,
    pub final_train_loss: Option<f64>,
    pub epochs: Option<usize>,
    /// One-based epoch whose weights were kept.
    pub best_dev_epoch: Option<usize>,
    pub dev_f1_history: Vec<f64>,
}

fn decode_all(tagger: &Tagger, data: &NerDataset, constrained: bool) -> Result<Vec<Vec<Tag>>> {
    data.sentences.iter().map(|s| tagger.decode(&s.words, constrained)).collect()
}

fn score_dataset(tagger: &Tagger, data: &NerDataset, constrained: bool, scoring: Scoring) -> Result<EvalScores> {
    let pred = decode_all(tagger, data, constrained)?;
    let gold: Vec<Vec<Tag>> = data.sentences.iter().map(|s| s.tags.clone()).collect();
    score_tags(&pred, &gold, scoring)
}

/// Trains a fresh CRF head (and, for [`Regime::Full`], the backbone) on
/// `train`, keeping the weights of the best dev-F1 epoch. Without `dev`, a
/// deterministic tenth of `train` is held out.
pub fn finetune_run(
    backbone: &Backbone,
    vocab: &Vocab,
    train: &NerDataset,
    dev: Option<&NerDataset>,
    cfg: &FinetuneConfig,
    audit: &mut DataAudit,
) -> Result<(Tagger, EvalReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("training split {} is empty", train.id)));
    }
    let split;
    let (train, dev) = match dev {
        Some(d) => (train, d),
        None => {
            split = train.split_dev();
            (&split.0, &split.1)
        }
    };
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data(format!("{} needs non-empty train and dev splits", train.id)));
    }
    audit.optimizer.insert(train.id.clone());
    audit.selection.insert(dev.id.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tagger = Tagger::new(backbone, vocab, TagScheme::iob2(), &mut rng)?;
    let frozen = cfg.regime == Regime::HeadOnly;
    if frozen {
        for id in tagger.backbone_ids() {
            tagger.store.set_trainable(id, false);
        }
    }
    let before: Vec<Vec<f32>> = tagger.backbone_ids().iter().map(|&id| tagger.store.get(id).data().to_vec()).collect();

    let encoded: Vec<Vec<u32>> = train.sentences.iter().map(|s| tagger.encode(&s.words)).collect();
    let gold: Vec<Vec<usize>> = train.sentences.iter().map(|s| tagger.scheme.indices(&s.tags)).collect();
    let cached: Option<Vec<Tensor<f32>>> =
        if frozen { Some(encoded.iter().map(|ids| tagger.feature_tensor(ids)).collect::<Result<_>>()?) } else { None };

    let mut store = tagger.store.clone();
    let mut opt = OptimizerState::new(&store);
    let adam = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = store.clone();
    let mut best_scores = None;
    let mut history = Vec::new();
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let feats = match &cached {
                    Some(c) => tape.constant(c[i].clone()),
                    None => tagger.features(&mut tape, &store, &encoded[i])?,
                };
                losses.push(tagger.nll_from(&mut tape, &store, feats, &gold[i])?);
            }
            let mut sum = losses[0];
            for &l in &losses[1..] {
                sum = tape.add(sum, l)?;
            }
            let loss = tape.scale(sum, 1.0 / batch.len() as f32);
            let value = tape.scalar(sum)? as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite CRF loss in epoch {epoch}")));
            }
            total += value;
            backward(&tape, loss, &mut store)?;
            adamw_step(&mut store, &mut opt, cfg.lr, &adam)?;
            store.zero_grad();
        }
        final_loss = total / train.len() as f64;

        std::mem::swap(&mut tagger.store, &mut store);
        let scores = score_dataset(&tagger, dev, cfg.constrained, cfg.scoring)?;
        std::mem::swap(&mut tagger.store, &mut store);
        history.push(scores.micro.f1);
        if stopper.observe(epoch, scores.micro.f1) {
            best_store = store.clone();
            best_scores = Some(scores);
        }
        if stopper.should_stop() {
            break;
        }
    }

    tagger.store = best_store;
    if frozen {
        for (id, b) in tagger.backbone_ids().into_iter().zip(&before) {
            if tagger.store.get(id).data() != b.as_slice() {
                return Err(Error::Training(format!("{} changed under head-only finetuning", tagger.store.name(id))));
            }
        }
    }
    let report = EvalReport {
        checkpoint: backbone.id.clone(),
        checkpoint_step: backbone.step,
        regime: Some(cfg.regime),
        seed: Some(cfg.seed),
        constrained: cfg.constrained,
        scoring: cfg.scoring,
        datasets: BTreeMap::from([(dev.id.clone(), best_scores.expect("at least one epoch ran"))]),
        final_train_loss: Some(final_loss),
        epochs: Some(history.len()),
        best_dev_epoch: stopper.best().map(|b| b.0),
        dev_f1_history: history,
    };
    Ok((tagger, report))
}

/// Decodes every sentence of each dataset and scores the spans. Weights are never touched.
pub fn evaluate_model(
    tagger: &Tagger,
    datasets: &[&NerDataset],
    constrained: bool,
    scoring: Scoring,
    audit: &mut DataAudit,
) -> Result<EvalReport> {
    let mut out = BTreeMap::new();
    for d in datasets {
        if out.contains_key(&d.id) {
            return Err(Error::Config(format!("dataset {} requested twice", d.id)));
        }
        audit.evaluation.insert(d.id.clone());
        out.insert(d.id.clone(), score_dataset(tagger, d, constrained, scoring)?);
    }
    Ok(EvalReport {
        checkpoint: tagger.backbone_id.clone(),
        checkpoint_step: None,
        regime: None,
        seed: None,
        constrained,
        scoring,
        datasets: out,
        final_train_loss: None,
        epochs: None,
        best_dev_epoch: None,
        dev_f1_history: Vec::new(),
    })
}
