#![allow(dead_code)]

use std::path::Path;

use metapico_core::data::ner::{gen_synthetic_ner, gen_synthetic_ner_with, NerDataset, SyntheticNerSpec};
use metapico_core::data::{gen_synthetic_corpus, Vocab};
use metapico_core::model::ModelConfig;
use metapico_core::train::*;
use metapico_ner::Backbone;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 256;

pub struct World {
    pub vocab: Vocab,
    pub source: NerDataset,
    pub dialect: NerDataset,
    pub configs: RunConfigs,
    corpus: metapico_core::data::PretokenizedCorpus,
}

pub fn world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (corpus, vocab) = gen_synthetic_corpus(VOCAB, 2000, 33, &mut rng).unwrap();
    let mut source = gen_synthetic_ner(400, 1.0, &mut rng).unwrap();
    source.id = "source".into();
    let mut dialect = gen_synthetic_ner_with(200, &SyntheticNerSpec::dialect(0.5), &mut rng).unwrap();
    dialect.id = "dialect".into();
    let configs = RunConfigs { model: ModelConfig::desk(VOCAB), train: TrainConfig::desk(), meta: MetaConfig::desk() };
    World { vocab, source, dialect, configs, corpus }
}

impl World {
    /// Hybrid pretraining for `steps` steps, writing checkpoints under `out` when given.
    pub fn pretrain(&self, steps: usize, every: usize, out: Option<&Path>) -> Backbone {
        let mut cfg = self.configs.clone();
        cfg.train.total_steps = steps;
        cfg.train.checkpoint_every = every;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps.saturating_sub(1));
        let opts = TrainOptions { world_size: 1, out_dir: out.map(Path::to_path_buf), until: None };
        let run = hybrid_train_loop(&self.corpus, None, &cfg, TrainState::fresh(&cfg).unwrap(), &opts).unwrap();
        Backbone::from_checkpoint(&run.state.to_checkpoint(&cfg), format!("step{steps}")).unwrap()
    }
}
