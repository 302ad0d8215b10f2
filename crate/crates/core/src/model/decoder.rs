//! LLaMa-style causal decoder: pre-norm blocks of grouped-query attention
//! with rotary positions and SwiGLU feed-forwards, untied output projection.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn_norm: ParamId,
    pub q_proj: ParamId,
    pub k_proj: ParamId,
    pub v_proj: ParamId,
    pub o_proj: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// Parameter handles of a decoder living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: ModelConfig,
    pub token_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: ParamId,
    pub output: ParamId,
}

/// Tape handles of one attention block's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

impl Decoder {
    /// Registers freshly initialised weights in `store`: matrices ~ N(0, 0.02²), gains = 1.
    pub fn init<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_std(config, store, rng, INIT_STD)
    }

    pub fn init_with_std<T: Real>(
        config: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        std: f64,
    ) -> Result<Self> {
        config.validate()?;
        let (d, kv, ff, v) = (config.d_model, config.kv_dim(), config.d_ff, config.vocab_size);
        let token_embedding = store.add("tok_embeddings", normal_tensor(&[v, d], std, rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            layers.push(LayerParams {
                attn_norm: store.add(format!("{p}.attention_norm"), Tensor::full(&[d], T::one())),
                q_proj: store.add(format!("{p}.attention.q_proj"), normal_tensor(&[d, d], std, rng)),
                k_proj: store.add(format!("{p}.attention.k_proj"), normal_tensor(&[d, kv], std, rng)),
                v_proj: store.add(format!("{p}.attention.v_proj"), normal_tensor(&[d, kv], std, rng)),
                o_proj: store.add(format!("{p}.attention.o_proj"), normal_tensor(&[d, d], std, rng)),
                ffn_norm: store.add(format!("{p}.swiglu_norm"), Tensor::full(&[d], T::one())),
                w_gate: store.add(format!("{p}.swiglu.w_0"), normal_tensor(&[d, ff], std, rng)),
                w_up: store.add(format!("{p}.swiglu.w_1"), normal_tensor(&[d, ff], std, rng)),
                w_down: store.add(format!("{p}.swiglu.w_2"), normal_tensor(&[ff, d], std, rng)),
            });
        }
        let final_norm = store.add("output_norm", Tensor::full(&[d], T::one()));
        let output = store.add("de_embedding_proj", normal_tensor(&[v, d], std, rng));
        Ok(Self { config, token_embedding, layers, final_norm, output })
    }

    /// Re-attaches handles to a store that already holds this layout (e.g. a loaded checkpoint).
    pub fn attach<T: Real>(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let get =
            |name: String| store.id(&name).ok_or_else(|| Error::Config(format!("parameter {name} missing from store")));
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            layers.push(LayerParams {
                attn_norm: get(format!("{p}.attention_norm"))?,
                q_proj: get(format!("{p}.attention.q_proj"))?,
                k_proj: get(format!("{p}.attention.k_proj"))?,
                v_proj: get(format!("{p}.attention.v_proj"))?,
                o_proj: get(format!("{p}.attention.o_proj"))?,
                ffn_norm: get(format!("{p}.swiglu_norm"))?,
                w_gate: get(format!("{p}.swiglu.w_0"))?,
                w_up: get(format!("{p}.swiglu.w_1"))?,
                w_down: get(format!("{p}.swiglu.w_2"))?,
            });
        }
        let dec = Self {
            token_embedding: get("tok_embeddings".into())?,
            final_norm: get("output_norm".into())?,
            output: get("de_embedding_proj".into())?,
            layers,
            config,
        };
        for id in dec.param_ids() {
            let t = store.get(id);
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {} holds non-finite values", store.name(id))));
            }
        }
        Ok(dec)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding];
        for l in &self.layers {
            ids.extend([l.attn_norm, l.q_proj, l.k_proj, l.v_proj, l.o_proj, l.ffn_norm, l.w_gate, l.w_up, l.w_down]);
        }
        ids.extend([self.final_norm, self.output]);
        ids
    }

    /// Matrices whose singular-value spectra are monitored during pretraining.
    pub fn monitored_matrices(&self) -> Vec<(&'static str, ParamId)> {
        let last = self.layers.last().expect("at least one layer");
        vec![
            ("attention.q_proj", last.q_proj),
            ("attention.v_proj", last.v_proj),
            ("attention.o_proj", last.o_proj),
            ("swiglu.w_0", last.w_gate),
            ("swiglu.w_1", last.w_up),
            ("swiglu.w_2", last.w_down),
        ]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Residual stream after each block (index 0 is the embedding output).
    pub fn layer_outputs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[u32],
    ) -> Result<Vec<Var>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let table = tape.param(store, self.token_embedding);
        let mut x = tape.select_rows(table, &ids)?;
        let mut outs = vec![x];
        for layer in &self.layers {
            let g = tape.param(store, layer.attn_norm);
            let h = tape.rmsnorm(x, g, cfg.norm_eps)?;
            let w = AttentionWeights {
                q: tape.param(store, layer.q_proj),
                k: tape.param(store, layer.k_proj),
                v: tape.param(store, layer.v_proj),
                o: tape.param(store, layer.o_proj),
            };
            let a = gqa_attention(tape, h, &w, cfg, &positions)?;
            x = tape.add(x, a)?;

            let g = tape.param(store, layer.ffn_norm);
            let h = tape.rmsnorm(x, g, cfg.norm_eps)?;
            let (wg, wu, wd) =
                (tape.param(store, layer.w_gate), tape.param(store, layer.w_up), tape.param(store, layer.w_down));
            let f = swiglu_ffn(tape, h, wg, wu, wd)?;
            x = tape.add(x, f)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Final-normalised hidden states `[T × d_model]`.
    pub fn hidden_states<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[u32]) -> Result<Var> {
        let x = *self.layer_outputs(tape, store, tokens)?.last().unwrap();
        let g = tape.param(store, self.final_norm);
        tape.rmsnorm(x, g, self.config.norm_eps)
    }

    /// Logits `[T × vocab_size]`.
    pub fn forward_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[u32]) -> Result<Var> {
        let h = self.hidden_states(tape, store, tokens)?;
        let w = tape.param(store, self.output);
        let wt = tape.transpose(w)?;
        tape.matmul(h, wt)
    }

    /// Mean next-token cross-entropy of `tokens[1..]` given `tokens[..len-1]`.
    pub fn next_token_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[u32]) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::Length("next-token loss needs at least two tokens".into()));
        }
        let (input, target) = (&tokens[..tokens.len() - 1], &tokens[1..]);
        let logits = self.forward_logits(tape, store, input)?;
        let targets: Vec<Option<usize>> = target.iter().map(|&t| Some(t as usize)).collect();
        tape.cross_entropy(logits, &targets)
    }

    /// Mean of per-sequence next-token losses over a batch.
    pub fn batch_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[Vec<u32>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for seq in batch {
            losses.push(self.next_token_loss(tape, store, seq)?);
        }
        let stacked = tape.concat_rows(&losses)?;
        Ok(tape.mean(stacked))
    }
}

/// Grouped-query causal self-attention over `x: [T × d_model]`.
pub fn gqa_attention<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionWeights,
    cfg: &ModelConfig,
    positions: &[usize],
) -> Result<Var> {
    let t = tape.shape(x)[0];
    if t > cfg.max_seq_len {
        return Err(Error::Length(format!("{t} positions exceed max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_seq_len) {
        return Err(Error::Length(format!("position {p} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    let dh = cfg.head_dim();
    let group = cfg.n_heads / cfg.n_kv_heads;
    let q = tape.matmul(x, w.q)?;
    let k = tape.matmul(x, w.k)?;
    let v = tape.matmul(x, w.v)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut kv_heads = Vec::with_capacity(cfg.n_kv_heads);
    for g in 0..cfg.n_kv_heads {
        let kg = tape.slice_cols(k, g * dh, dh)?;
        let kg = tape.rope(kg, positions, cfg.rope_theta)?;
        let kt = tape.transpose(kg)?;
        let vg = tape.slice_cols(v, g * dh, dh)?;
        kv_heads.push((kt, vg));
    }
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (kt, vg) = kv_heads[h / group];
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let qh = tape.rope(qh, positions, cfg.rope_theta)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.causal_softmax(scores)?;
        heads.push(tape.matmul(probs, vg)?);
    }
    let merged = tape.concat_cols(&heads)?;
    tape.matmul(merged, w.o)
}

/// `w_down · (silu(x·w_gate) ⊙ (x·w_up))`.
pub fn swiglu_ffn<T: Real>(tape: &mut Tape<T>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = tape.matmul(x, w_gate)?;
    let up = tape.matmul(x, w_up)?;
    let h = tape.swiglu(gate, up)?;
    tape.matmul(h, w_down)
}

/// Rotary embedding of per-head query/key stacks shaped `[heads, T, d_h]`.
pub fn rope_apply<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    positions: &[usize],
    theta: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let rotate = |x: &Tensor<T>| -> Result<Tensor<T>> {
        if x.shape().len() != 3 {
            return Err(Error::shape(format!("expected [heads, T, d_h], got {:?}", x.shape())));
        }
        let (h, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if positions.len() != t {
            return Err(Error::shape(format!("{} positions for {t} rows", positions.len())));
        }
        let mut out = Vec::with_capacity(x.len());
        for head in 0..h {
            let mut tape = Tape::new();
            let slab = Tensor::new(vec![t, dh], x.data()[head * t * dh..(head + 1) * t * dh].to_vec())?;
            let v = tape.constant(slab);
            let r = tape.rope(v, positions, theta)?;
            out.extend_from_slice(tape.value(r));
        }
        Tensor::new(x.shape().to_vec(), out)
    };
    Ok((rotate(q)?, rotate(k)?))
}
