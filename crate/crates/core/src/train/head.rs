//! Persistent MLP classifier used inside meta-learning episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Dense layers `x·W + b` with ReLU and inverted dropout between them.
#[derive(Clone, Debug)]
pub struct EpisodeHead {
    pub layers: Vec<(ParamId, ParamId)>,
    pub dropout: f64,
}

/// Folds a list of integers into one well-mixed 64-bit seed (splitmix64 finaliser per word).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Identifies one forward pass for dropout purposes. Masks depend only on
/// this key, the example's global index and the layer, never on the rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub micro: u64,
    pub phase: u64,
}

impl DropoutKey {
    pub fn with_phase(self, phase: u64) -> Self {
        Self { phase, ..self }
    }

    fn mask<T: Real>(&self, examples: &[usize], layer: usize, width: usize, p: f64) -> Vec<T> {
        let keep = T::of(1.0 / (1.0 - p));
        let mut out = Vec::with_capacity(examples.len() * width);
        for &ex in examples {
            let seed = mix_seed(&[self.seed, self.step, self.micro, self.phase, ex as u64, layer as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.extend((0..width).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }));
        }
        out
    }
}

impl EpisodeHead {
    /// Glorot-uniform weights, zero biases, registered as `head.{i}.weight` / `head.{i}.bias`.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        d_in: usize,
        hidden: usize,
        n_layers: usize,
        n_out: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("episode head needs at least one layer".into()));
        }
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(hidden, n_layers - 1));
        dims.push(n_out);
        let mut layers = Vec::with_capacity(n_layers);
        for (i, w) in dims.windows(2).enumerate() {
            let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).map_err(|e| Error::Config(e.to_string()))?;
            let weight = Tensor::from_fn(&[w[0], w[1]], |_| T::of(dist.sample(rng)));
            let wid = store.add(format!("head.{i}.weight"), weight);
            let bid = store.add(format!("head.{i}.bias"), Tensor::zeros(&[w[1]]));
            layers.push((wid, bid));
        }
        Ok(Self { layers, dropout })
    }

    /// Re-binds a head whose tensors already live in `store`.
    pub fn attach<T: Real>(store: &ParamStore<T>, dropout: f64) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(w) = store.id(&format!("head.{}.weight", layers.len())) {
            let b = store
                .id(&format!("head.{}.bias", layers.len()))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("head.{}.bias missing", layers.len())))?;
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(Error::CorruptCheckpoint("no episode head tensors".into()));
        }
        Ok(Self { layers, dropout })
    }

    /// Parameter ids as `[w0, b0, w1, b1, ...]`.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn n_out<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.layers.last().unwrap().0).cols()
    }

    pub fn snapshot<T: Real>(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.param_ids().into_iter().map(|id| store.get(id).clone()).collect()
    }

    /// Current store values as tape leaves.
    pub fn param_leaves<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Vec<Var> {
        self.param_ids().into_iter().map(|id| tape.param(store, id)).collect()
    }

    /// `values` (ordered like [`Self::param_ids`]) as leaves. With `track`
    /// their adjoints are reported under the head's parameter ids.
    pub fn value_leaves<T: Real>(&self, tape: &mut Tape<T>, values: &[Tensor<T>], track: bool) -> Vec<Var> {
        self.param_ids()
            .into_iter()
            .zip(values)
            .map(|(id, v)| if track { tape.param_value(id, v) } else { tape.constant(v.clone()) })
            .collect()
    }

    /// Logits for feature rows `x`. `dropout` supplies the key and the global
    /// index of each row; `None` runs the head deterministically.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        leaves: &[Var],
        dropout: Option<(DropoutKey, &[usize])>,
    ) -> Result<Var> {
        let n = self.layers.len();
        let mut h = x;
        for (i, wb) in leaves.chunks(2).enumerate() {
            h = tape.matmul(h, wb[0])?;
            h = tape.add_row_bias(h, wb[1])?;
            if i + 1 < n {
                h = tape.relu(h);
                if let Some((key, examples)) = dropout {
                    if self.dropout > 0.0 {
                        let width = tape.shape(h)[1];
                        h = tape.mul_const(h, key.mask(examples, i, width, self.dropout))?;
                    }
                }
            }
        }
        Ok(h)
    }
}
