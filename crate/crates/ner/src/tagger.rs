//! Decoder backbone plus a linear-chain CRF tagging head.

use std::fs;
use std::path::Path;

use metapico_core::data::ner::{Tag, TaggedSentence};
use metapico_core::data::Vocab;
use metapico_core::model::{Decoder, ModelConfig};
use metapico_core::train::{load_checkpoint, Checkpoint, TensorEntry};
use metapico_core::{Error, ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{crf_nll, marginals, viterbi_decode, Transitions};
use crate::scheme::TagScheme;

pub const TAGGER_MANIFEST: &str = "tagger.json";
pub const TAGGER_WEIGHTS: &str = "tagger.bin";

#[derive(Serialize, Deserialize)]
struct TaggerManifest {
    model: ModelConfig,
    backbone_id: String,
    labels: Vec<String>,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Pretrained decoder weights, without the episodic head.
#[derive(Clone, Debug)]
pub struct Backbone {
    /// Checkpoint identifier carried into reports.
    pub id: String,
    pub step: Option<usize>,
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
}

impl Backbone {
    pub fn from_checkpoint(ckpt: &Checkpoint, id: impl Into<String>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (_, name, t) in ckpt.store.iter() {
            if !name.starts_with("head.") {
                store.add(name, Tensor::new(t.shape().to_vec(), t.data().to_vec())?);
            }
        }
        Decoder::attach(ckpt.config.model.clone(), &store)?;
        Ok(Self { id: id.into(), step: Some(ckpt.step), config: ckpt.config.model.clone(), store })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(dir)?, dir.display().to_string())
    }

    /// Freshly initialised decoder, for tests and untrained baselines.
    pub fn random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        Decoder::init(config.clone(), &mut store, rng)?;
        Ok(Self { id: "random".into(), step: None, config, store })
    }
}

/// Parameter ids of the CRF head inside a tagger's store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrfHead {
    pub emission: ParamId,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfHead {
    /// Glorot-uniform emission projection; zero transition, start and end scores.
    pub fn init(store: &mut ParamStore<f32>, d_model: usize, k: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (d_model + k) as f64).sqrt();
        let w = Tensor::from_fn(&[d_model, k], |_| rng.random_range(-limit..limit) as f32);
        Self {
            emission: store.add("crf.emission", w),
            transitions: store.add("crf.transitions", Tensor::zeros(&[k, k])),
            start: store.add("crf.start", Tensor::zeros(&[k])),
            end: store.add("crf.end", Tensor::zeros(&[k])),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.emission, self.transitions, self.start, self.end]
    }

    pub fn chain(&self, store: &ParamStore<f32>) -> Transitions<f32> {
        let k = store.get(self.start).len();
        Transitions {
            k,
            transitions: store.get(self.transitions).data().to_vec(),
            start: store.get(self.start).data().to_vec(),
            end: store.get(self.end).data().to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tagger {
    pub decoder: Decoder,
    pub head: CrfHead,
    pub store: ParamStore<f32>,
    pub scheme: TagScheme,
    pub vocab: Vocab,
    pub backbone_id: String,
}

impl Tagger {
    /// Attaches an untrained CRF head to a copy of the backbone.
    pub fn new(backbone: &Backbone, vocab: &Vocab, scheme: TagScheme, rng: &mut impl Rng) -> Result<Self> {
        if vocab.len() > backbone.config.vocab_size {
            return Err(Error::Vocabulary(format!(
                "vocabulary of {} words exceeds the model's {}",
                vocab.len(),
                backbone.config.vocab_size
            )));
        }
        let mut store = backbone.store.clone();
        let decoder = Decoder::attach(backbone.config.clone(), &store)?;
        let head = CrfHead::init(&mut store, backbone.config.d_model, scheme.len(), rng);
        Ok(Self { decoder, head, store, scheme, vocab: vocab.clone(), backbone_id: backbone.id.clone() })
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        self.vocab.encode_words(words)
    }

    /// Final hidden state of every word `[T × d_model]`. Sentences longer
    /// than the context are processed in consecutive independent windows.
    pub fn features(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Data("cannot tag an empty sentence".into()));
        }
        let window = self.decoder.config.max_seq_len;
        let parts =
            ids.chunks(window).map(|c| self.decoder.hidden_states(tape, store, c)).collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// Frozen-backbone features as a plain tensor.
    pub fn feature_tensor(&self, ids: &[u32]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let f = self.features(&mut tape, &self.store, ids)?;
        Ok(tape.tensor(f))
    }

    pub fn emissions_from(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, features: Var) -> Result<Var> {
        let w = tape.param(store, self.head.emission);
        tape.matmul(features, w)
    }

    /// Sentence negative log-likelihood from precomputed or on-tape features.
    pub fn nll_from(
        &self,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        features: Var,
        gold: &[usize],
    ) -> Result<Var> {
        let em = self.emissions_from(tape, store, features)?;
        let [tr, st, en] = [self.head.transitions, self.head.start, self.head.end].map(|id| tape.param(store, id));
        crf_nll(tape, em, tr, st, en, gold)
    }

    pub fn emissions(&self, words: &[String]) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let f = self.features(&mut tape, &self.store, &self.encode(words))?;
        let em = self.emissions_from(&mut tape, &self.store, f)?;
        let t = tape.tensor(em);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
    }

    fn chain64(&self) -> Transitions<f64> {
        self.head.chain(&self.store).cast()
    }

    pub fn decode(&self, words: &[String], constrained: bool) -> Result<Vec<Tag>> {
        let em = self.emissions(words)?;
        let path = viterbi_decode(&em, &self.chain64(), constrained.then_some(&self.scheme))?;
        self.scheme.tags(&path)
    }

    /// CRF marginals `[T × K]` in label-index order.
    pub fn marginals(&self, words: &[String]) -> Result<Tensor<f64>> {
        marginals(&self.emissions(words)?, &self.chain64())
    }

    /// Marginal probability of the gold tag at every word.
    pub fn gold_confidence(&self, sentence: &TaggedSentence) -> Result<Vec<f64>> {
        let m = self.marginals(&sentence.words)?;
        Ok(sentence.tags.iter().enumerate().map(|(t, &tag)| m.row(t)[self.scheme.index(tag)]).collect())
    }

    /// Writes `tagger.json` and little-endian f32 `tagger.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        for (_, name, t) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.into(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: bytes.len() as u64,
            });
            t.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        let manifest = TaggerManifest {
            model: self.decoder.config.clone(),
            backbone_id: self.backbone_id.clone(),
            labels: self.scheme.labels().iter().map(|t| t.to_string()).collect(),
            vocab: self.vocab.words().to_vec(),
            tensors,
        };
        fs::write(dir.join(TAGGER_WEIGHTS), &bytes)?;
        fs::write(dir.join(TAGGER_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let text = fs::read_to_string(dir.join(TAGGER_MANIFEST))?;
        let m: TaggerManifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("{TAGGER_MANIFEST}: {e}")))?;
        let scheme = TagScheme::iob2();
        let labels: Vec<String> = scheme.labels().iter().map(|t| t.to_string()).collect();
        if m.labels != labels {
            return Err(corrupt(format!("label set {:?} is not IOB2", m.labels)));
        }
        let bytes = fs::read(dir.join(TAGGER_WEIGHTS))?;
        let mut store = ParamStore::new();
        let mut expected = 0u64;
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            let end = expected + 4 * n as u64;
            if e.dtype != "f32" || e.offset != expected || end > bytes.len() as u64 {
                return Err(corrupt(format!("tensor {} does not match the weight file", e.name)));
            }
            let data = bytes[expected as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected = end;
        }
        if expected != bytes.len() as u64 {
            return Err(corrupt(format!("manifest covers {expected} bytes, weight file has {}", bytes.len())));
        }
        let decoder = Decoder::attach(m.model, &store)?;
        let id = |name: &str| store.id(name).ok_or_else(|| corrupt(format!("missing tensor {name}")));
        let head = CrfHead {
            emission: id("crf.emission")?,
            transitions: id("crf.transitions")?,
            start: id("crf.start")?,
            end: id("crf.end")?,
        };
        let vocab = Vocab::from_words(m.vocab)?;
        Ok(Self { decoder, head, store, scheme, vocab, backbone_id: m.backbone_id })
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.decoder.param_ids()
    }
}
