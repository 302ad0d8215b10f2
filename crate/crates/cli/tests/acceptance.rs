//! Acceptance suite: one PASS/FAIL line per criterion, each at its stated
//! tolerance. Reference values come from independent oracles in this file.
//!
//! Set `METAPICO_TAGALOG_CONLL` to one or more Universal NER Tagalog files
//! (joined like `PATH`) to run the informational particle-recall check.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use metapico_analysis::{
    default_particles, effective_rank_proportional, initial_slope, normalized_auc, particle_recall, t90, LossCurve,
};
use metapico_core::data::ner::{load_conll, EntityType, NerDataset, Tag, TaggedSentence};
use metapico_core::data::{gen_synthetic_corpus, gen_synthetic_ner_with, PretokenizedCorpus, SyntheticNerSpec};
use metapico_core::episodes::{Episode, EpisodeConfig, EpisodeExample, EpisodeSampler};
use metapico_core::gradcheck::finite_diff_check;
use metapico_core::model::{gqa_attention, rope_apply, AttentionWeights, Decoder, ModelConfig};
use metapico_core::train::*;
use metapico_core::{backward, Error, ParamStore, Result, Tape, Tensor, Var};
use metapico_ner::{
    evaluate_model, finetune_run, log_partition, path_score, spans_from_strs, viterbi_decode, Backbone, DataAudit,
    FinetuneConfig, Regime, Scoring, Span, Transitions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(r))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let mut r = rng(seed);
    let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Unary)> {
    vec![
        ("matmul", |t, x| {
            let w = t.constant(randn(&[4, 3], &mut rng(11)));
            t.matmul(x, w)
        }),
        ("matmul_rhs", |t, x| {
            let a = t.constant(randn(&[2, 3], &mut rng(12)));
            t.matmul(a, x)
        }),
        ("add", |t, x| {
            let c = t.constant(randn(&[3, 4], &mut rng(13)));
            t.add(x, c)
        }),
        ("mul", |t, x| {
            let c = t.constant(randn(&[3, 4], &mut rng(14)));
            let y = t.mul(x, c)?;
            t.mul(y, x)
        }),
        ("sub", |t, x| {
            let c = t.constant(randn(&[3, 4], &mut rng(15)));
            t.sub(c, x)
        }),
        ("row_bias", |t, x| {
            let b = t.constant(randn(&[4], &mut rng(16)));
            t.add_row_bias(x, b)
        }),
        ("logsumexp", |t, x| t.logsumexp_rows(x)),
        ("softmax", |t, x| t.softmax_rows(x)),
        ("causal_softmax", |t, x| {
            let sq = t.slice_cols(x, 0, 3)?;
            t.causal_softmax(sq)
        }),
        ("embedding_gather", |t, x| t.select_rows(x, &[2, 0, 2, 1])),
        ("cross_entropy", |t, x| t.cross_entropy(x, &[Some(1), None, Some(3)])),
        ("rmsnorm", |t, x| {
            let g = t.constant(randn(&[4], &mut rng(17)));
            t.rmsnorm(x, g, 1e-6)
        }),
        ("swiglu", |t, x| {
            let u = t.constant(randn(&[3, 4], &mut rng(19)));
            t.swiglu(x, u)
        }),
        ("relu", |t, x| {
            // Shift away from the kink so the central difference is exact.
            let shift = t.constant(Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 3.0 } else { -3.0 }));
            let y = t.add(x, shift)?;
            Ok(t.relu(y))
        }),
        ("rope", |t, x| t.rope(x, &[0, 3, 7], 10_000.0)),
        ("transpose", |t, x| t.transpose(x)),
        ("concat", |t, x| {
            let c = t.constant(randn(&[3, 2], &mut rng(20)));
            let a = t.concat_cols(&[x, c])?;
            t.concat_rows(&[a, a])
        }),
        ("scale_mean", |t, x| {
            let y = t.scale(x, 2.5);
            Ok(t.mean(y))
        }),
    ]
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let prims = primitives();
    for (name, f) in &prims {
        for seed in 0..5 {
            let x = randn(&[3, 4], &mut rng(100 + seed));
            let err = ok(finite_diff_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y, 1000 + seed)
                },
                &x,
                1e-5,
            ))?;
            ensure!(err < 1e-4, "{name} (seed {seed}) relative error {err:.2e}");
            worst = worst.max(err);
        }
    }
    let x = randn(&[3, 4], &mut rng(18));
    let gain = randn(&[4], &mut rng(19));
    let err = ok(finite_diff_check(
        |t, g| {
            let vx = t.constant(x.clone());
            let y = t.rmsnorm(vx, g, 1e-6)?;
            weighted_sum(t, y, 20)
        },
        &gain,
        1e-5,
    ))?;
    ensure!(err < 1e-4, "rmsnorm gain relative error {err:.2e}");
    worst = worst.max(err);
    // Full desk-tier LM loss. With V = 256 many output-projection gradients
    // sit near 1e-7, where a plain central difference cannot resolve 1e-4
    // relative at any single ε, so the oracle is a five-point stencil.
    let cfg = ok(ModelConfig::tier("desk"))?;
    let mut store = ParamStore::<f64>::new();
    let dec = ok(Decoder::init_with_std(cfg, &mut store, &mut rng(11), 0.3))?;
    let toks = [3u32, 70, 1, 220, 70, 9, 130, 41];
    let err = ok(five_point_check(|t, s| dec.next_token_loss(t, s, &toks), &store, 1e-3))?;
    ensure!(err < 1e-4, "desk LM loss relative error {err:.2e}");
    worst = worst.max(err);
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}");
    Ok(format!(
        "{} primitives, the rmsnorm gain and the desk LM loss ({} params), max rel err {worst:.1e} < 1e-4, {elapsed:.1?} < 60 s",
        prims.len(),
        store.total_numel()
    ))
}

/// Max over parameter coordinates of `|analytic − numeric| / (|numeric| + 1e-8)`,
/// with the numeric derivative from the fourth-order stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
fn five_point_check(
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    store: &ParamStore<f64>,
    h: f64,
) -> Result<f64> {
    let value = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    for id in ids {
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = orig + dx;
                value(&probe)
            };
            let numeric = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max((a - numeric).abs() / (numeric.abs() + 1e-8));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- 2

fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out.into_iter().flat_map(|p| (0..k).map(move |y| [p.clone(), vec![y]].concat())).collect();
    }
    out
}

fn brute_score(em: &Tensor<f64>, ch: &Transitions<f64>, y: &[usize]) -> f64 {
    let k = ch.k;
    let mut s = ch.start[y[0]] + ch.end[*y.last().unwrap()];
    for t in 0..y.len() {
        s += em.data()[t * k + y[t]];
        if t > 0 {
            s += ch.transitions[y[t - 1] * k + y[t]];
        }
    }
    s
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut r = rng(2024);
    let (mut z_err, mut norm_err, mut ties) = (0.0f64, 0.0f64, 0);
    for i in 0..200 {
        let (t, k) = (r.random_range(1..=4), r.random_range(1..=5));
        // Every other instance uses small integers so that tied paths are common.
        let integer = i % 2 == 1;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| if integer { r.random_range(-2..=2) as f64 } else { r.random_range(-3.0..3.0) }).collect()
        };
        let em = ok(Tensor::new(vec![t, k], draw(t * k)))?;
        let ch = ok(Transitions::new(k, draw(k * k), draw(k), draw(k)))?;
        let paths = all_paths(t, k);
        let scores: Vec<f64> = paths.iter().map(|y| brute_score(&em, &ch, y)).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let brute_z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        let z = ok(log_partition(&em, &ch))?;
        z_err = z_err.max((z - brute_z).abs());
        let total: f64 = scores.iter().map(|s| (s - z).exp()).sum();
        norm_err = norm_err.max((total - 1.0).abs());

        // Tie-break: among best paths, the one smallest when read from the end.
        let rev = |p: &[usize]| p.iter().rev().copied().collect::<Vec<_>>();
        let best: Vec<&Vec<usize>> = paths.iter().zip(&scores).filter(|(_, &s)| s == m).map(|(p, _)| p).collect();
        ties += usize::from(best.len() > 1);
        let want = best.iter().min_by_key(|p| rev(p)).unwrap();
        let got = ok(viterbi_decode(&em, &ch, None))?;
        ensure!(&got == *want, "instance {i}: viterbi {got:?}, enumeration {want:?}");
        ensure!(ok(path_score(&em, &ch, &got))? == m, "instance {i}: viterbi score differs");
    }
    ensure!(z_err < 1e-6, "log Z error {z_err:.2e}");
    ensure!(norm_err < 1e-6, "normalisation error {norm_err:.2e}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:.1?}");
    Ok(format!(
        "200 instances: log Z err {z_err:.1e}, normalisation err {norm_err:.1e}, Viterbi exact ({ties} with ties), {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------- 3

fn rope_oracle(x: &[f64], pos: usize, theta: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = x.to_vec();
    for i in 0..d / 2 {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = angle.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard multi-head attention with rotary positions, in plain loops.
fn mha_oracle(x: &Tensor<f64>, w: &[Tensor<f64>; 4], heads: usize, kv_heads: usize, theta: f64) -> Vec<f64> {
    let (t, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let proj = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| (0..w.cols()).map(|j| (0..d).map(|p| x.row(i)[p] * w.data()[p * w.cols() + j]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(&w[0]), proj(&w[1]), proj(&w[2]));
    let mut merged = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let g = h / (heads / kv_heads);
        let qh: Vec<Vec<f64>> = (0..t).map(|i| rope_oracle(&q[i][h * dh..(h + 1) * dh], i, theta)).collect();
        let kh: Vec<Vec<f64>> = (0..t).map(|i| rope_oracle(&k[i][g * dh..(g + 1) * dh], i, theta)).collect();
        for i in 0..t {
            let scores: Vec<f64> = (0..=i).map(|j| dot(&qh[i], &kh[j]) / (dh as f64).sqrt()).collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let p = (s - m).exp() / z;
                for c in 0..dh {
                    merged[i][h * dh + c] += p * v[j][g * dh + c];
                }
            }
        }
    }
    let wo = &w[3];
    (0..t)
        .flat_map(|i| {
            (0..d).map(|j| (0..d).map(|p| merged[i][p] * wo.data()[p * d + j]).sum::<f64>()).collect::<Vec<_>>()
        })
        .collect()
}

fn criterion_3() -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for (heads, kv) in [(2, 2), (4, 4), (4, 2), (4, 1)] {
        let mut cfg = ModelConfig::desk(16);
        cfg.n_heads = heads;
        cfg.n_kv_heads = kv;
        let (d, kvd) = (cfg.d_model, cfg.kv_dim());
        let x = randn(&[7, d], &mut r);
        let w = [randn(&[d, d], &mut r), randn(&[d, kvd], &mut r), randn(&[d, kvd], &mut r), randn(&[d, d], &mut r)];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let aw = AttentionWeights {
            q: tape.constant(w[0].clone()),
            k: tape.constant(w[1].clone()),
            v: tape.constant(w[2].clone()),
            o: tape.constant(w[3].clone()),
        };
        let positions: Vec<usize> = (0..x.rows()).collect();
        let out = ok(gqa_attention(&mut tape, xv, &aw, &cfg, &positions))?;
        let gap = max_abs_diff(tape.value(out), &mha_oracle(&x, &w, heads, kv, cfg.rope_theta));
        ensure!(gap < 1e-5, "{heads} heads / {kv} kv heads differ from MHA by {gap:.2e}");
        worst = worst.max(gap);
    }

    // Causality: perturbing token t+1 leaves every position ≤ t bit-identical.
    let cfg = ModelConfig::desk(50);
    let mut store = ParamStore::<f32>::new();
    let dec = ok(Decoder::init(cfg.clone(), &mut store, &mut rng(7)))?;
    let base = [4u32, 17, 9, 33, 8, 21, 40, 12];
    for t in 0..base.len() - 1 {
        let mut changed = base;
        changed[t + 1] = (changed[t + 1] + 7) % 50;
        let (mut ta, mut tb) = (Tape::new(), Tape::new());
        let la = ok(dec.forward_logits(&mut ta, &store, &base))?;
        let lb = ok(dec.forward_logits(&mut tb, &store, &changed))?;
        ensure!(ta.value(la)[..(t + 1) * 50] == tb.value(lb)[..(t + 1) * 50], "prefix {t} changed");
    }

    // RoPE: q·k depends only on the position offset.
    let mut rel = 0.0f64;
    for trial in 0..50 {
        let (q, k) = (randn(&[1, 1, 8], &mut r), randn(&[1, 1, 8], &mut r));
        let score = |pq: usize, pk: usize| -> Result<f64> {
            let (rq, _) = rope_apply(&q, &q, &[pq], 10_000.0)?;
            let (_, rk) = rope_apply(&k, &k, &[pk], 10_000.0)?;
            Ok(dot(rq.data(), rk.data()))
        };
        let (m, n, s) = (trial % 13, (trial * 7) % 11, (trial * 5) % 17 + 1);
        rel = rel.max((ok(score(m, n))? - ok(score(m + s, n + s))?).abs());
    }
    ensure!(rel < 1e-5, "RoPE relative-position gap {rel:.2e}");
    Ok(format!("GQA vs MHA max gap {worst:.1e} < 1e-5, causal prefixes bit-exact, RoPE offset gap {rel:.1e} < 1e-5"))
}

// ---------------------------------------------------------------- 4

const VOCAB: usize = 128;

fn corpus(n: usize, seed: u64) -> PretokenizedCorpus {
    gen_synthetic_corpus(VOCAB, n, 17, &mut rng(seed)).unwrap().0
}

fn small_configs(rho: f64, total: usize) -> RunConfigs {
    let mut model = ModelConfig::desk(VOCAB);
    model.max_seq_len = 16;
    RunConfigs {
        model,
        train: TrainConfig {
            total_steps: total,
            warmup_steps: 2.min(total - 1),
            accum_steps: 2,
            micro_batch: 4,
            checkpoint_every: 5,
            log_every: 5,
            eval_sequences: 4,
            ..TrainConfig::desk()
        },
        meta: MetaConfig { rho, n_ways: 4, k_shots: 2, q_queries: 2, head_hidden: 16, ..MetaConfig::desk() },
    }
}

fn f64_store(cfg: &RunConfigs, seed: u64) -> Result<(ParamStore<f64>, Decoder, EpisodeHead)> {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let dec = Decoder::init(cfg.model.clone(), &mut store, &mut r)?;
    let m = &cfg.meta;
    let head = EpisodeHead::init(
        &mut store,
        cfg.model.d_model,
        m.head_hidden,
        m.head_layers,
        m.n_ways,
        m.head_dropout,
        &mut r,
    )?;
    Ok((store, dec, head))
}

fn key(step: u64) -> DropoutKey {
    DropoutKey { seed: 7, step, micro: 0, phase: 0 }
}

/// Four classes, each marked by its own token right before the mask.
fn separable_episode(seed: u64) -> Episode {
    let mut r = rng(seed);
    let words: Vec<u32> = (0..4).map(|i| 10 + 7 * i).collect();
    let (mut support, mut query) = (vec![], vec![]);
    let mut source = 0;
    for label in 0..4 {
        for j in 0..4 {
            source += 1;
            let len = r.random_range(4..9);
            let mut tokens: Vec<u32> = vec![3; len];
            let p = r.random_range(1..len);
            tokens[p] = metapico_core::data::MASK;
            tokens[p - 1] = words[label] + 1;
            let ex = EpisodeExample { tokens, label, mask_positions: vec![p], source };
            if j < 2 {
                support.push(ex);
            } else {
                query.push(ex);
            }
        }
    }
    Episode { n_ways: 4, k_shots: 2, q_queries: 2, class_words: words, support, query }
}

fn criterion_4() -> Check {
    let c = corpus(1000, 4);
    let sampler =
        ok(EpisodeSampler::new(&c, EpisodeConfig { n_ways: 4, k_shots: 2, q_queries: 2, max_doc_freq: 0.2 }))?;

    // inner_steps = 0: the update is the plain classification gradient.
    let mut cfg = small_configs(1.0, 10);
    cfg.meta.inner_steps = 0;
    cfg.meta.head_dropout = 0.0;
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let (store0, dec, head) = ok(f64_store(&cfg, 10 + seed))?;
        let ep = ok(sampler.sample(&mut rng(seed)))?;
        let mut store = store0.clone();
        let stats = ok(maml_episode_update(&ep, &dec, &head, &mut store, &cfg.meta, key(0), 1.0))?;
        let mut reference = store0.clone();
        let mut tape = Tape::new();
        let x = ok(episode_features(&dec, &mut tape, &reference, &ep.query))?;
        let leaves = head.param_leaves(&mut tape, &reference);
        let logits = ok(head.forward(&mut tape, x, &leaves, None))?;
        let targets: Vec<Option<usize>> = ep.query.iter().map(|e| Some(e.label)).collect();
        let loss = ok(tape.cross_entropy(logits, &targets))?;
        ok(backward(&tape, loss, &mut reference))?;
        worst = worst.max((stats.query_loss - ok(tape.scalar(loss))?).abs());
        for ((_, name, a), (_, _, b)) in store.iter().zip(reference.iter()) {
            let (ga, gb) = (a.grad().unwrap_or(&[]), b.grad().unwrap_or(&[]));
            ensure!(ga.len() == gb.len(), "{name}: gradient presence differs");
            worst = worst.max(max_abs_diff(ga, gb));
        }
    }
    ensure!(worst < 1e-6, "inner_steps=0 differs from plain classification by {worst:.2e}");

    // Structural: the query tape holds one leaf per head tensor and no inner-loop state.
    let cfg = small_configs(1.0, 10);
    let (store, dec, head) = ok(f64_store(&cfg, 20))?;
    let ep = ok(sampler.sample(&mut rng(1)))?;
    let adaptation = ok(adapt_head(&dec, &head, &store, &ep.support, &cfg.meta, key(0)))?;
    let mut tape = Tape::new();
    ok(query_loss(&mut tape, &dec, &head, &store, &ep.query, 0, &adaptation.adapted, &cfg.meta, key(0)))?;
    for id in head.param_ids() {
        let n = tape.leaf_count(id);
        ensure!(n == 1, "head tensor {} appears {n} times on the query tape", store.name(id));
    }
    let head_ids: BTreeSet<_> = head.param_ids().into_iter().collect();
    let reachable: BTreeSet<_> = tape.grad_targets().into_iter().filter(|id| head_ids.contains(id)).collect();
    ensure!(reachable == head_ids, "query gradients reach {} of {} head tensors", reachable.len(), head_ids.len());

    // Adaptation helps on separable toy episodes.
    let mut cfg = small_configs(1.0, 10);
    cfg.meta.inner_lr = 0.05;
    let mut good = 0;
    for seed in 0..100 {
        let (store, dec, head) = ok(f64_store(&cfg, 1000 + seed))?;
        let ep = separable_episode(seed);
        ok(ep.validate())?;
        let a = ok(adapt_head(&dec, &head, &store, &ep.support, &cfg.meta, key(seed)))?;
        good += usize::from(a.support_acc_after >= a.support_acc_before);
    }
    ensure!(good >= 90, "support accuracy did not drop in only {good}/100 episodes");
    Ok(format!("inner_steps=0 gap {worst:.1e} < 1e-6, one leaf per head tensor, support acc kept in {good}/100 ≥ 90"))
}

// ---------------------------------------------------------------- 5

fn train(c: &PretokenizedCorpus, cfg: &RunConfigs, ws: usize) -> Result<TrainOutcome> {
    hybrid_train_loop(c, None, cfg, TrainState::fresh(cfg)?, &TrainOptions { world_size: ws, ..Default::default() })
}

fn max_param_gap(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, _, x), (_, _, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f32::max)
}

fn criterion_5() -> Check {
    let c = corpus(1000, 12);
    let cfg = small_configs(0.5, 50);
    let one = ok(train(&c, &cfg, 1))?;
    let two = ok(train(&c, &cfg, 2))?;
    let gap = max_param_gap(&one.state.store, &two.state.store);
    ensure!(gap < 1e-5, "world_size 2 vs 1 parameter gap {gap:.2e} after 50 steps");

    let mut cfg = small_configs(0.5, 200);
    cfg.train.accum_steps = 1;
    cfg.train.log_every = 200;
    cfg.train.checkpoint_every = 200;
    let four = ok(train(&c, &cfg, 4))?;
    ensure!(four.rank_branches.iter().all(|b| b == &four.rank_branches[0]), "ranks took different branches");
    let maml = four.rank_branches[0].iter().filter(|b| **b == Branch::Maml).count();

    let mut cfg = small_configs(0.5, 40);
    cfg.train.accum_steps = 1;
    cfg.train.sync_branch = false;
    match train(&c, &cfg, 2) {
        Err(Error::Consistency(_)) => {}
        Err(e) => return Err(format!("desynchronised ranks failed with {e}")),
        Ok(_) => return Err("desynchronised ranks went unnoticed".into()),
    }
    cfg.train.verify_consistency = false;
    let desync = ok(train(&c, &cfg, 2))?;
    ensure!(desync.rank_branches[0] != desync.rank_branches[1], "per-rank branch draws agreed");
    cfg.train.sync_branch = true;
    let reference = ok(train(&c, &cfg, 1))?;
    let drift = max_param_gap(&desync.state.store, &reference.state.store);
    ensure!(drift > 1e-3, "desynchronised run stayed within {drift:.2e} of the reference");
    Ok(format!(
        "ws2 vs ws1 gap {gap:.1e} < 1e-5 after 50 steps, 4 ranks share 200 branches ({maml} episodes), desync detected and drifts {drift:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let c = corpus(1000, 9);
    let cfg = small_configs(0.5, 20);
    let a = ok(train(&c, &cfg, 1))?;
    let b = ok(train(&c, &cfg, 1))?;
    ensure!(max_param_gap(&a.state.store, &b.state.store) == 0.0 && a.history == b.history, "reruns differ");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = TrainOptions { world_size: 1, out_dir: Some(dir.path().to_path_buf()), until: None };
    let full = ok(hybrid_train_loop(&c, None, &cfg, ok(TrainState::fresh(&cfg))?, &opts))?;
    let ckpt = ok(load_checkpoint(&checkpoint_dir(&dir.path().join(CHECKPOINT_SUBDIR), 5)))?;
    let resumed = ok(hybrid_train_loop(&c, None, &cfg, TrainState::from_checkpoint(ckpt), &TrainOptions::default()))?;
    ensure!(resumed.history.len() >= 10, "resumed for only {} steps", resumed.history.len());
    ensure!(resumed.history == full.history[5..], "resumed losses differ");
    ensure!(max_param_gap(&resumed.state.store, &full.state.store) == 0.0, "resumed parameters differ");
    ensure!(resumed.state.optimizer == full.state.optimizer, "resumed optimizer state differs");

    let steps = checkpoint_steps(6000, 100);
    ensure!(steps.len() == 61 && steps[0] == 0 && steps[60] == 6000, "{} checkpoints for 6000/100", steps.len());
    Ok(format!(
        "bit-identical rerun, resume from step 5 bit-identical for {} steps, 61 checkpoints",
        resumed.history.len()
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let steps: Vec<f64> = (0..6).map(|i| 100.0 * i as f64).collect();
    let worked = ok(LossCurve::from_values(&steps, &[1.0, 0.5, 0.2, 0.11, 0.1, 0.1]))?;
    let w = ok(t90(&worked))?;
    ensure!(w == 300.0, "worked example t90 {w}");

    // e^{-t/τ} sampled every Δ: the first sample at or under the threshold
    // lies within one interval after the closed-form crossing.
    let (tau, dt, horizon) = (250.0, 5.0, 3000.0);
    let n = (horizon / dt) as usize + 1;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let exp_curve = ok(LossCurve::from_values(&xs, &xs.iter().map(|t| (-t / tau).exp()).collect::<Vec<_>>()))?;
    let fin = (-horizon / tau).exp();
    let crossing = -tau * (fin + 0.1 * (1.0 - fin)).ln();
    let got = ok(t90(&exp_curve))?;
    ensure!(got >= crossing && got - crossing < dt, "exponential t90 {got} vs closed form {crossing:.3}");

    let constant = ok(LossCurve::from_values(&[10.0, 20.0, 30.0], &[2.0, 2.0, 2.0]))?;
    ensure!(ok(t90(&constant))? == 10.0, "constant t90 is not the first step");
    let auc_c = ok(normalized_auc(&constant))?;
    ensure!(auc_c.value == 0.0 && auc_c.degenerate, "constant AUC {auc_c:?}");
    ensure!(ok(initial_slope(&constant, 3))? == 0.0, "constant slope");

    let line = ok(LossCurve::from_values(&[0.0, 10.0, 20.0, 30.0, 40.0, 50.0], &[5.0, 4.98, 4.96, 4.94, 4.92, 4.90]))?;
    let auc = ok(normalized_auc(&line))?.value;
    ensure!((auc - 0.5).abs() < 1e-9, "linear AUC {auc}");
    let slope = ok(initial_slope(&line, 5))?;
    ensure!((slope + 2e-3).abs() < 1e-12, "linear slope {slope}");

    // Noisy line against the normal equations solved directly.
    let mut r = rng(77);
    let xs: Vec<f64> = (0..5).map(|i| 100.0 * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 6.0 - 3e-3 * x + r.random_range(-0.05..0.05)).collect();
    let (n, sx, sy) = (5.0, xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let oracle = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let noisy = ok(initial_slope(&ok(LossCurve::from_values(&xs, &ys))?, 5))?;
    ensure!((noisy - oracle).abs() < 1e-9, "noisy slope {noisy} vs {oracle}");
    Ok(format!("worked t90 = 300, exponential t90 {got} vs {crossing:.2} (Δ = {dt}), linear AUC 0.5, slopes exact"))
}

// ---------------------------------------------------------------- 8

/// One-sided Jacobi: orthogonalise column pairs; singular values are the column norms.
fn jacobi_singular_values(a: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let (rows, cols) = if m >= n { (m, n) } else { (n, m) };
    let get = |i: usize, j: usize| if m >= n { a.data()[i * n + j] } else { a.data()[j * n + i] };
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| get(i, j)).collect()).collect();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() < 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 { 1.0 } else { zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt()) };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

fn criterion_8() -> Check {
    for n in [1, 4, 16, 33] {
        let per = ok(effective_rank_proportional(&Tensor::<f64>::eye(n)))?.ok_or("identity has no PER")?;
        ensure!((per - 1.0).abs() < 1e-12, "{n}×{n} identity PER {per}");
    }
    let mut r = rng(8);
    for (m, n) in [(4, 7), (9, 3), (16, 16)] {
        let (u, v) = (randn(&[m], &mut r), randn(&[n], &mut r));
        let a = Tensor::from_fn(&[m, n], |k| u.data()[k / n] * v.data()[k % n]);
        let per = ok(effective_rank_proportional(&a))?.ok_or("rank-1 has no PER")?;
        ensure!((per - 1.0 / m.min(n) as f64).abs() < 1e-6, "{m}×{n} rank-1 PER {per}");
    }
    let mut worst = 0.0f64;
    for (m, n) in [(8, 6), (6, 8), (16, 64), (30, 30)] {
        for _ in 0..5 {
            let a = randn(&[m, n], &mut r);
            let s = jacobi_singular_values(&a);
            let total: f64 = s.iter().sum();
            let h: f64 = s.iter().map(|v| v / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
            let oracle = h.exp() / m.min(n) as f64;
            let per = ok(effective_rank_proportional(&a))?.ok_or("random matrix has no PER")?;
            worst = worst.max((per - oracle).abs());
        }
    }
    ensure!(worst < 1e-6, "random-matrix PER differs from the Jacobi oracle by {worst:.2e}");
    Ok(format!("identity 1.0, rank-1 1/min(m,n), random vs Jacobi SVD max gap {worst:.1e} < 1e-6"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let start = Instant::now();
    let vocab_size = 256;
    let model = ok(ModelConfig::tier("desk"))?;
    let (all, vocab) = ok(gen_synthetic_corpus(vocab_size, 2064, model.max_seq_len + 1, &mut rng(0)))?;
    let (corpus, heldout) = all.split_tail(64);
    let cfg = RunConfigs { model, train: TrainConfig::desk(), meta: MetaConfig { rho: 0.5, ..MetaConfig::desk() } };
    ensure!(cfg.train.total_steps == 500, "desk run is {} steps", cfg.train.total_steps);
    let state = ok(TrainState::fresh(&cfg))?;
    let out = ok(hybrid_train_loop(
        &corpus,
        Some(&heldout),
        &cfg,
        state,
        &TrainOptions { world_size: 1, ..Default::default() },
    ))?;
    let last = out.metrics.last().ok_or("no metrics logged")?;
    let heldout_loss = last.heldout_loss.ok_or("no held-out loss at the final log step")?;
    let drop = (vocab_size as f64).ln() - heldout_loss;
    ensure!(drop >= 0.5, "held-out loss {heldout_loss:.3} is only {drop:.3} nats under ln V");
    let episodes = out.history.iter().filter(|h| h.branch == Branch::Maml).count();

    let backbone = ok(Backbone::from_checkpoint(&out.state.to_checkpoint(&cfg), "desk-500"))?;
    let mut source = ok(gen_synthetic_ner_with(600, &SyntheticNerSpec::source(1.0), &mut rng(1)))?;
    source.id = "source".into();
    let mut dialect = ok(gen_synthetic_ner_with(200, &SyntheticNerSpec::dialect(0.5), &mut rng(2)))?;
    dialect.id = "dialect".into();
    let ft = FinetuneConfig { regime: Regime::HeadOnly, max_epochs: 10, ..FinetuneConfig::desk() };
    let mut audit = DataAudit::default();
    let (tagger, report) = ok(finetune_run(&backbone, &vocab, &source, None, &ft, &mut audit))?;
    let dev_f1 = report.dev_f1_history.iter().copied().fold(0.0, f64::max);
    let epochs = report.epochs.unwrap_or(0);
    ensure!(epochs <= 10, "{epochs} epochs");
    ensure!(dev_f1 >= 0.8, "head-only dev micro-F1 {dev_f1:.3} < 0.8");

    let scored = ok(evaluate_model(&tagger, &[&dialect], true, Scoring::Span, &mut audit))?;
    ok(audit.check_zero_shot())?;
    let d = &scored.datasets["dialect"];
    let (per, org) = (d.type_f1(EntityType::Per), d.type_f1(EntityType::Org));
    ensure!(per > org, "dialect PER-F1 {per:.3} ≤ ORG-F1 {org:.3}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(15 * 60), "took {elapsed:.1?}");
    Ok(format!(
        "500 steps ({episodes} episodes): held-out loss {heldout_loss:.3}, {drop:.2} nats under ln 256; head-only dev F1 {dev_f1:.3} in {} epochs; dialect PER-F1 {per:.3} > ORG-F1 {org:.3}; {elapsed:.1?}",
        epochs
    ))
}

// ---------------------------------------------------------------- 10

pub const TAGALOG_ENV: &str = "METAPICO_TAGALOG_CONLL";

fn criterion_10() -> Check {
    let spans = ok(spans_from_strs(&["O", "O", "B-PER", "O", "B-LOC"]))?;
    let want = BTreeSet::from([Span::new(2, 2, EntityType::Per), Span::new(4, 4, EntityType::Loc)]);
    ensure!(spans == want, "gloss spans {spans:?}");
    let words = ["Pumunta", "si", "Maria", "sa", "Cebu"].map(String::from).to_vec();
    let gloss = ok(TaggedSentence::new(words, vec![Tag::O, Tag::O, Tag::BPer, Tag::O, Tag::BLoc]))?;
    let recall = particle_recall(&NerDataset::new("gloss", vec![gloss]), &["si", "ni"]);
    ensure!(recall == Some(1.0), "gloss particle recall {recall:?}");

    let Some(paths) = std::env::var_os(TAGALOG_ENV) else {
        return Ok(format!(
            "gloss spans {{(2,2,PER),(4,4,LOC)}} and recall 1.0; Tagalog check skipped ({TAGALOG_ENV} unset)"
        ));
    };
    let mut sentences = Vec::new();
    for p in std::env::split_paths(&paths).collect::<Vec<PathBuf>>() {
        sentences.extend(ok(load_conll(&p))?.sentences);
    }
    let r = particle_recall(&NerDataset::new("tagalog", sentences), &default_particles())
        .ok_or("no PER spans in the Tagalog files")?;
    ensure!((r - 0.113).abs() <= 0.02, "Tagalog particle recall {r:.3} outside 0.113 ± 0.02");
    Ok(format!("gloss spans and recall 1.0; Tagalog particle recall {r:.3} within 0.113 ± 0.02"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", criterion_1),
        ("CRF exactness", criterion_2),
        ("attention correctness", criterion_3),
        ("first-order MAML contract", criterion_4),
        ("distributed equivalence", criterion_5),
        ("determinism and resume", criterion_6),
        ("convergence-metric oracles", criterion_7),
        ("spectral metric", criterion_8),
        ("end-to-end desk pipeline", criterion_9),
        ("metric fidelity on reference data", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {label}: PASS ({detail})"),
            Err(reason) => {
                failed += 1;
                println!("criterion {label}: FAIL ({reason})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
