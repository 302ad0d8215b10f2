//! Outer training loop. Every simulated rank runs [`rank_loop`] on its own
//! replica; ranks interact only through collectives.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collectives::{Comm, RankGroup};
use crate::data::{sample_lm_indices, PretokenizedCorpus};
use crate::episodes::{Episode, EpisodeSampler};
use crate::error::{Error, Result};
use crate::model::Decoder;
use crate::tape::ParamStore;
use crate::tensor::Tensor;
use crate::train::adamw::{adamw_step, AdamWConfig, OptimizerState};
use crate::train::checkpoint::{checkpoint_dir, save_checkpoint, Checkpoint, RunConfigs, TrainStreams};
use crate::train::head::{mix_seed, DropoutKey, EpisodeHead};
use crate::train::metrics::{log_step_metrics, Branch, MetricsRecord, StepSummary};
use crate::train::schedule::lr_at;
use crate::train::update::{ar_update, maml_shard_update, EpisodeStats};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_SUBDIR: &str = "checkpoints";
const INIT_STREAM: u64 = 0x1417;

/// Replica state carried between steps and stored in checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimizer updates.
    pub step: usize,
    pub store: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub streams: TrainStreams,
}

impl TrainState {
    /// Fresh decoder and episode head initialised from `train.seed`.
    pub fn fresh(configs: &RunConfigs) -> Result<Self> {
        configs.model.validate()?;
        configs.train.validate()?;
        configs.meta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[configs.train.seed, INIT_STREAM]));
        let mut store = ParamStore::new();
        Decoder::init(configs.model.clone(), &mut store, &mut rng)?;
        let m = &configs.meta;
        EpisodeHead::init(
            &mut store,
            configs.model.d_model,
            m.head_hidden,
            m.head_layers,
            m.n_ways,
            m.head_dropout,
            &mut rng,
        )?;
        let optimizer = OptimizerState::new(&store);
        Ok(Self { step: 0, store, optimizer, streams: TrainStreams::new(configs.train.seed) })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self { step: ckpt.step, store: ckpt.store, optimizer: ckpt.optimizer, streams: ckpt.streams }
    }

    pub fn to_checkpoint(&self, configs: &RunConfigs) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: configs.clone(),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            streams: self.streams.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub branch: Branch,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub world_size: usize,
    /// Directory receiving `metrics.jsonl` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed updates instead of `total_steps`.
    pub until: Option<usize>,
}

pub struct TrainOutcome {
    /// Rank 0's final replica.
    pub state: TrainState,
    pub history: Vec<StepRecord>,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Branch taken at every step, per rank.
    pub rank_branches: Vec<Vec<Branch>>,
    /// Largest absolute parameter difference between rank 0 and any other replica.
    pub max_replica_divergence: f64,
}

struct RankOutput {
    state: TrainState,
    history: Vec<StepRecord>,
    metrics: Vec<MetricsRecord>,
    checkpoints: Vec<PathBuf>,
    branches: Vec<Branch>,
}

struct Shared<'a> {
    corpus: &'a PretokenizedCorpus,
    heldout: Option<&'a PretokenizedCorpus>,
    configs: &'a RunConfigs,
    out_dir: Option<&'a Path>,
    until: usize,
}

/// Runs hybrid pretraining from `state` on `world_size` simulated ranks.
pub fn hybrid_train_loop(
    corpus: &PretokenizedCorpus,
    heldout: Option<&PretokenizedCorpus>,
    configs: &RunConfigs,
    state: TrainState,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    configs.train.validate()?;
    configs.meta.validate()?;
    let ws = options.world_size.max(1);
    let until = options.until.unwrap_or(configs.train.total_steps).min(configs.train.total_steps);
    if configs.train.micro_batch % ws != 0 {
        return Err(Error::Config(format!("micro_batch {} does not split over {ws} ranks", configs.train.micro_batch)));
    }
    let m = &configs.meta;
    if m.rho > 0.0 && (m.n_ways * m.q_queries) % ws != 0 {
        return Err(Error::Config(format!("{} query examples do not split over {ws} ranks", m.n_ways * m.q_queries)));
    }
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir.join(CHECKPOINT_SUBDIR))?;
    }
    let shared = Shared { corpus, heldout, configs, out_dir: options.out_dir.as_deref(), until };
    let group = RankGroup::new(ws)?;
    let results = group.run(|comm| rank_loop(comm, &shared, &state));

    let mut outputs = Vec::with_capacity(ws);
    let mut first_err: Option<Error> = None;
    for r in results {
        match r {
            Ok(o) => outputs.push(o),
            Err(e) => {
                // A deadlock is usually the echo of another rank's failure.
                if first_err
                    .as_ref()
                    .is_none_or(|f| matches!(f, Error::Deadlock(_)) && !matches!(e, Error::Deadlock(_)))
                {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let rank_branches = outputs.iter().map(|o| o.branches.clone()).collect();
    let mut max_replica_divergence = 0.0f64;
    for other in &outputs[1..] {
        for ((_, _, a), (_, _, b)) in outputs[0].state.store.iter().zip(other.state.store.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                max_replica_divergence = max_replica_divergence.max((x - y).abs() as f64);
            }
        }
    }
    let root = outputs.swap_remove(0);
    Ok(TrainOutcome {
        state: root.state,
        history: root.history,
        metrics: root.metrics,
        checkpoints: root.checkpoints,
        rank_branches,
        max_replica_divergence,
    })
}

fn shard_range(total: usize, ws: usize, rank: usize) -> std::ops::Range<usize> {
    let per = total / ws;
    rank * per..(rank + 1) * per
}

/// Replaces every gradient by its cross-rank mean. Parameters without a
/// gradient on every rank are left without one.
fn all_reduce_grads(comm: &mut Comm, store: &mut ParamStore<f32>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    let mut flat = Vec::with_capacity(store.total_numel() + ids.len());
    for &id in &ids {
        match store.get(id).grad() {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat_n(0.0, store.get(id).len())),
        }
    }
    flat.extend(ids.iter().map(|&id| if store.get(id).grad().is_some() { 1.0f32 } else { 0.0 }));
    let n = flat.len();
    let reduced = comm.all_reduce_mean(Tensor::new(vec![n], flat)?)?.into_data();
    let present = &reduced[n - ids.len()..];
    let mut offset = 0;
    for (k, &id) in ids.iter().enumerate() {
        let len = store.get(id).len();
        store.get_mut(id).zero_grad();
        if present[k] > 0.0 {
            store.get_mut(id).accumulate_grad(&reduced[offset..offset + len])?;
        }
        offset += len;
    }
    Ok(())
}

fn append_jsonl<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn rank_loop(comm: &mut Comm, sh: &Shared, init: &TrainState) -> Result<RankOutput> {
    let (train, meta) = (&sh.configs.train, &sh.configs.meta);
    let (rank, ws, root) = (comm.rank(), comm.world_size(), comm.is_root());
    let mut state = init.clone();
    if !train.sync_branch && rank > 0 {
        state.streams = TrainStreams::for_rank(train.seed, rank);
    }
    let decoder = Decoder::attach(sh.configs.model.clone(), &state.store)?;
    let head = EpisodeHead::attach(&state.store, meta.head_dropout)?;
    let sampler = if meta.rho > 0.0 { Some(EpisodeSampler::new(sh.corpus, meta.episode_config())?) } else { None };
    let adam = AdamWConfig { betas: train.betas, eps: train.adam_eps, weight_decay: train.weight_decay };
    let inv_accum = 1.0 / train.accum_steps as f64;
    let ckpt_root = sh.out_dir.map(|d| d.join(CHECKPOINT_SUBDIR));

    let mut out =
        RankOutput { state: init.clone(), history: vec![], metrics: vec![], checkpoints: vec![], branches: vec![] };
    if root && state.step == 0 {
        if let Some(dir) = &ckpt_root {
            let path = checkpoint_dir(dir, 0);
            save_checkpoint(&path, &state.to_checkpoint(sh.configs))?;
            out.checkpoints.push(path);
        }
    }

    for s in state.step..sh.until {
        let draw: f64 = if train.sync_branch {
            let r = if root { state.streams.branch.random() } else { 0.0 };
            comm.broadcast(r, 0)?
        } else {
            state.streams.branch.random()
        };
        let branch = if draw < meta.rho { Branch::Maml } else { Branch::Ar };
        if train.verify_consistency {
            let code = if branch == Branch::Maml { 1.0f32 } else { 0.0 };
            let all = comm.all_gather(Tensor::new(vec![1], vec![code])?)?;
            if all.data().iter().any(|&c| c != code) {
                return Err(Error::Consistency(format!(
                    "ranks disagree on the branch at step {}: {:?}",
                    s + 1,
                    all.data()
                )));
            }
        }
        out.branches.push(branch);

        let mut loss_sum = 0.0;
        let mut ep_sum = EpisodeStats::default();
        for micro in 0..train.accum_steps {
            let key = DropoutKey { seed: train.seed, step: s as u64, micro: micro as u64, phase: 0 };
            match branch {
                Branch::Ar => {
                    let mine: Vec<usize> = if train.sync_branch {
                        let payload = root.then(|| {
                            let idx = sample_lm_indices(sh.corpus, train.micro_batch, &mut state.streams.data);
                            (0..ws).map(|r| idx[shard_range(idx.len(), ws, r)].to_vec()).collect()
                        });
                        comm.scatter(payload, 0)?
                    } else {
                        let idx = sample_lm_indices(sh.corpus, train.micro_batch, &mut state.streams.data);
                        idx[shard_range(idx.len(), ws, rank)].to_vec()
                    };
                    let batch: Vec<Vec<u32>> = mine.iter().map(|&i| sh.corpus.sequences()[i].clone()).collect();
                    loss_sum += ar_update(&decoder, &mut state.store, &batch, inv_accum)?;
                }
                Branch::Maml => {
                    let sampler = sampler.as_ref().expect("sampler exists when rho > 0");
                    let episode: Arc<Episode> = if train.sync_branch {
                        let payload = root
                            .then(|| sampler.sample(&mut state.streams.data).map(|e| vec![Arc::new(e); ws]))
                            .transpose()?;
                        comm.scatter(payload, 0)?
                    } else {
                        Arc::new(sampler.sample(&mut state.streams.data)?)
                    };
                    let q = shard_range(episode.query.len(), ws, rank);
                    let start = q.start;
                    let stats = maml_shard_update(
                        &decoder,
                        &head,
                        &mut state.store,
                        &episode.support,
                        &episode.query[q],
                        start,
                        meta,
                        key,
                        inv_accum,
                    )?;
                    loss_sum += stats.query_loss;
                    ep_sum.query_loss += stats.query_loss;
                    ep_sum.support_acc_before += stats.support_acc_before;
                    ep_sum.support_acc_after += stats.support_acc_after;
                    ep_sum.query_acc += stats.query_acc;
                }
            }
            comm.barrier()?;
        }

        if ws > 1 {
            all_reduce_grads(comm, &mut state.store)?;
        }
        let lr = lr_at(s + 1, train);
        adamw_step(&mut state.store, &mut state.optimizer, lr, &adam)?;
        state.store.zero_grad();
        state.step = s + 1;

        let a = inv_accum as f32;
        let local = vec![
            loss_sum as f32 * a,
            ep_sum.support_acc_before as f32 * a,
            ep_sum.support_acc_after as f32 * a,
            ep_sum.query_acc as f32 * a,
        ];
        let g = comm.all_reduce_mean(Tensor::new(vec![4], local)?)?.into_data();
        let loss = g[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss} at step {}", state.step)));
        }
        let episode = (branch == Branch::Maml).then(|| EpisodeStats {
            query_loss: loss,
            support_acc_before: g[1] as f64,
            support_acc_after: g[2] as f64,
            query_acc: g[3] as f64,
        });
        out.history.push(StepRecord { step: state.step, branch, lr, loss });

        if root && state.step % train.log_every == 0 {
            let summary = StepSummary { step: state.step, branch, lr, train_loss: loss, episode };
            let rec = log_step_metrics(&decoder, &head, &state.store, &summary, sh.heldout, train.eval_sequences)?;
            if let Some(dir) = sh.out_dir {
                append_jsonl(&dir.join(METRICS_FILE), &rec)?;
            }
            out.metrics.push(rec);
        }
        if root && state.step % train.checkpoint_every == 0 {
            if let Some(dir) = &ckpt_root {
                let path = checkpoint_dir(dir, state.step);
                save_checkpoint(&path, &state.to_checkpoint(sh.configs))?;
                out.checkpoints.push(path);
            }
        }
    }
    out.state = state;
    Ok(out)
}
