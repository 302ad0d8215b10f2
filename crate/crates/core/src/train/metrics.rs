use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::PretokenizedCorpus;
use crate::error::Result;
use crate::model::Decoder;
use crate::spectral::effective_rank_proportional;
use crate::tape::{ParamStore, Tape};
use crate::tensor::Real;
use crate::train::head::EpisodeHead;
use crate::train::update::EpisodeStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Ar,
    Maml,
}

/// One line of `metrics.jsonl`. Every field is present on every line;
/// episode accuracies are null on AR steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub branch: Branch,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_perplexity: Option<f64>,
    pub support_acc_before: Option<f64>,
    pub support_acc: Option<f64>,
    pub query_acc: Option<f64>,
    pub head_weight_mean: f64,
    pub head_weight_std: f64,
    /// Proportional effective rank per monitored matrix; null for an all-zero matrix.
    pub per: BTreeMap<String, Option<f64>>,
}

/// Mean next-token loss over the first `n` sequences.
pub fn heldout_loss<T: Real>(
    decoder: &Decoder,
    store: &ParamStore<T>,
    corpus: &PretokenizedCorpus,
    n: usize,
) -> Result<f64> {
    let seqs = &corpus.sequences()[..n.min(corpus.len())];
    let mut total = 0.0;
    for s in seqs {
        let mut tape = Tape::new();
        let loss = decoder.next_token_loss(&mut tape, store, s)?;
        total += tape.scalar(loss)?.f64();
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Mean and population standard deviation over every element of every head tensor.
pub fn head_weight_stats<T: Real>(head: &EpisodeHead, store: &ParamStore<T>) -> (f64, f64) {
    let vals: Vec<f64> =
        head.param_ids().into_iter().flat_map(|id| store.get(id).data().iter().map(|v| v.f64())).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub struct StepSummary {
    pub step: usize,
    pub branch: Branch,
    pub lr: f64,
    pub train_loss: f64,
    pub episode: Option<EpisodeStats>,
}

#[allow(clippy::too_many_arguments)]
pub fn log_step_metrics<T: Real>(
    decoder: &Decoder,
    head: &EpisodeHead,
    store: &ParamStore<T>,
    summary: &StepSummary,
    heldout: Option<&PretokenizedCorpus>,
    eval_sequences: usize,
) -> Result<MetricsRecord> {
    let heldout_loss = match heldout {
        Some(c) if eval_sequences > 0 && !c.is_empty() => Some(heldout_loss(decoder, store, c, eval_sequences)?),
        _ => None,
    };
    let (head_weight_mean, head_weight_std) = head_weight_stats(head, store);
    let mut per = BTreeMap::new();
    for (name, id) in decoder.monitored_matrices() {
        per.insert(name.to_string(), effective_rank_proportional(store.get(id))?);
    }
    Ok(MetricsRecord {
        step: summary.step,
        branch: summary.branch,
        lr: summary.lr,
        train_loss: summary.train_loss,
        heldout_loss,
        heldout_perplexity: heldout_loss.map(f64::exp),
        support_acc_before: summary.episode.map(|e| e.support_acc_before),
        support_acc: summary.episode.map(|e| e.support_acc_after),
        query_acc: summary.episode.map(|e| e.query_acc),
        head_weight_mean,
        head_weight_std,
        per,
    })
}
