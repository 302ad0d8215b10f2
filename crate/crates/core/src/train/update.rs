//! The two outer-loop update kinds: next-token prediction and first-order
//! MAML episodes. Both accumulate gradients into the store; the caller owns
//! the optimizer step.

use crate::episodes::{Episode, EpisodeExample};
use crate::error::{Error, Result};
use crate::model::Decoder;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::train::config::MetaConfig;
use crate::train::head::{DropoutKey, EpisodeHead};

/// Dropout phase of inner step `t` on the support set; the query pass uses [`QUERY_PHASE`].
pub fn inner_phase(t: usize) -> u64 {
    1 + t as u64
}

pub const QUERY_PHASE: u64 = 0;

/// Accumulates gradients of `loss_scale · mean next-token loss` over `batch`
/// and returns the unscaled loss.
pub fn ar_update<T: Real>(
    decoder: &Decoder,
    store: &mut ParamStore<T>,
    batch: &[Vec<u32>],
    loss_scale: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = decoder.batch_loss(&mut tape, store, batch)?;
    let value = tape.scalar(loss)?.f64();
    let scaled = tape.scale(loss, T::of(loss_scale));
    let grads = tape.backward(scaled)?;
    store.accumulate(&grads)?;
    Ok(value)
}

/// Final-normalised hidden state at each example's first masked position, `[B × d]`.
/// Each sequence is cut just after that position, which causality makes exact.
pub fn episode_features<T: Real>(
    decoder: &Decoder,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    examples: &[EpisodeExample],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = ex.target_position();
        let h = decoder.hidden_states(tape, store, &ex.tokens[..=p])?;
        rows.push(tape.select_rows(h, &[p])?);
    }
    tape.concat_rows(&rows)
}

fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn head_accuracy<T: Real>(
    head: &EpisodeHead,
    feats: &Tensor<T>,
    weights: &[Tensor<T>],
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(feats.clone());
    let leaves = head.value_leaves(&mut tape, weights, false);
    let logits = head.forward(&mut tape, x, &leaves, None)?;
    Ok(accuracy(&tape.tensor(logits), labels))
}

fn targets(examples: &[EpisodeExample]) -> Vec<Option<usize>> {
    examples.iter().map(|e| Some(e.label)).collect()
}

/// Result of the inner loop: adapted head weights and support accuracy
/// before and after adaptation (dropout disabled for both).
pub struct Adaptation<T> {
    pub adapted: Vec<Tensor<T>>,
    pub support_acc_before: f64,
    pub support_acc_after: f64,
}

/// Plain SGD on a copy of the head over detached backbone features of the
/// support set. The store is never written.
pub fn adapt_head<T: Real>(
    decoder: &Decoder,
    head: &EpisodeHead,
    store: &ParamStore<T>,
    support: &[EpisodeExample],
    meta: &MetaConfig,
    key: DropoutKey,
) -> Result<Adaptation<T>> {
    let feats = {
        let mut tape = Tape::new();
        let f = episode_features(decoder, &mut tape, store, support)?;
        tape.tensor(f)
    };
    let labels: Vec<usize> = support.iter().map(|e| e.label).collect();
    let ids: Vec<usize> = (0..support.len()).collect();
    let mut phi = head.snapshot(store);
    let before = head_accuracy(head, &feats, &phi, &labels)?;
    let lr = T::of(meta.inner_lr);
    for t in 0..meta.inner_steps {
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let leaves = head.value_leaves(&mut tape, &phi, true);
        let logits = head.forward(&mut tape, x, &leaves, Some((key.with_phase(inner_phase(t)), &ids)))?;
        let loss = tape.cross_entropy(logits, &targets(support))?;
        let grads = tape.backward(loss)?;
        for (w, id) in phi.iter_mut().zip(head.param_ids()) {
            let g =
                grads.param(id).ok_or_else(|| Error::Training(format!("no inner gradient for {}", store.name(id))))?;
            w.data_mut().iter_mut().zip(g).for_each(|(p, &g)| *p -= lr * g);
        }
    }
    let after = head_accuracy(head, &feats, &phi, &labels)?;
    Ok(Adaptation { adapted: phi, support_acc_before: before, support_acc_after: after })
}

/// Builds the query loss on `tape`: backbone features with live parameter
/// leaves, head leaves holding `adapted`. With `head_outer_grad` the head
/// leaves report their adjoints under the head's parameter ids, otherwise
/// they are constants. Returns `(loss, features)`.
pub fn query_loss<T: Real>(
    tape: &mut Tape<T>,
    decoder: &Decoder,
    head: &EpisodeHead,
    store: &ParamStore<T>,
    query: &[EpisodeExample],
    query_offset: usize,
    adapted: &[Tensor<T>],
    meta: &MetaConfig,
    key: DropoutKey,
) -> Result<(Var, Var)> {
    let x = episode_features(decoder, tape, store, query)?;
    let leaves = head.value_leaves(tape, adapted, meta.head_outer_grad);
    let ids: Vec<usize> = (query_offset..query_offset + query.len()).collect();
    let logits = head.forward(tape, x, &leaves, Some((key.with_phase(QUERY_PHASE), &ids)))?;
    let loss = tape.cross_entropy(logits, &targets(query))?;
    Ok((loss, x))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub query_loss: f64,
    pub support_acc_before: f64,
    pub support_acc_after: f64,
    /// Adapted-head accuracy on the query examples, dropout disabled.
    pub query_acc: f64,
}

/// First-order MAML on one shard of the query set. Gradients of
/// `loss_scale · query loss` are accumulated into the backbone and, when
/// enabled, into the head at its unchanged pre-episode values.
#[allow(clippy::too_many_arguments)]
pub fn maml_shard_update<T: Real>(
    decoder: &Decoder,
    head: &EpisodeHead,
    store: &mut ParamStore<T>,
    support: &[EpisodeExample],
    query: &[EpisodeExample],
    query_offset: usize,
    meta: &MetaConfig,
    key: DropoutKey,
    loss_scale: f64,
) -> Result<EpisodeStats> {
    let adaptation = adapt_head(decoder, head, store, support, meta, key)?;
    let mut tape = Tape::new();
    let (loss, feats) =
        query_loss(&mut tape, decoder, head, store, query, query_offset, &adaptation.adapted, meta, key)?;
    let query_loss = tape.scalar(loss)?.f64();
    let scaled = tape.scale(loss, T::of(loss_scale));
    let grads = tape.backward(scaled)?;
    store.accumulate(&grads)?;

    let labels: Vec<usize> = query.iter().map(|e| e.label).collect();
    let query_acc = head_accuracy(head, &tape.tensor(feats), &adaptation.adapted, &labels)?;
    Ok(EpisodeStats {
        query_loss,
        support_acc_before: adaptation.support_acc_before,
        support_acc_after: adaptation.support_acc_after,
        query_acc,
    })
}

/// Single-worker episode update over the whole query set.
pub fn maml_episode_update<T: Real>(
    episode: &Episode,
    decoder: &Decoder,
    head: &EpisodeHead,
    store: &mut ParamStore<T>,
    meta: &MetaConfig,
    key: DropoutKey,
    loss_scale: f64,
) -> Result<EpisodeStats> {
    episode.validate()?;
    if head.n_out(store) != episode.n_ways {
        return Err(Error::Episode(format!(
            "head has {} outputs for a {}-way episode",
            head.n_out(store),
            episode.n_ways
        )));
    }
    maml_shard_update(decoder, head, store, &episode.support, &episode.query, 0, meta, key, loss_scale)
}
