use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use metapico_core::data::{gen_synthetic_corpus, load_pretokenized, PretokenizedCorpus, Vocab};
use metapico_core::model::ModelConfig;
use metapico_core::train::{
    hybrid_train_loop, load_checkpoint, TrainOptions, TrainState, CHECKPOINT_SUBDIR, METRICS_FILE,
};
use metapico_core::{Error, Result};
use metapico_ner::list_checkpoints;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{DataConfig, RunConfig, SNAPSHOT_FILE, VOCAB_FILE};
use crate::{PretrainArgs, OUT_ENV};

/// `--out`, else `$METAPICO_OUT/<stem>`, else `runs/<stem>`.
pub fn run_dir(out: Option<&Path>, config: &Path) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

/// Training and held-out corpora plus their vocabulary.
pub fn load_data(data: &DataConfig, model: &ModelConfig) -> Result<(PretokenizedCorpus, PretokenizedCorpus, Vocab)> {
    let seq_len = model.max_seq_len + 1;
    let (corpus, vocab) = match (&data.corpus, &data.vocab) {
        (Some(c), Some(v)) => {
            let vocab = Vocab::load(v)?;
            if vocab.len() > model.vocab_size {
                return Err(Error::Vocabulary(format!(
                    "{} holds {} words, the model {}",
                    v.display(),
                    vocab.len(),
                    model.vocab_size
                )));
            }
            (load_pretokenized(c, vocab.len(), Some(seq_len))?, vocab)
        }
        (None, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(data.seed);
            gen_synthetic_corpus(
                model.vocab_size,
                data.synthetic_sequences + data.heldout_sequences,
                seq_len,
                &mut rng,
            )?
        }
        _ => return Err(Error::Config("data.corpus and data.vocab must be given together".into())),
    };
    if corpus.len() <= data.heldout_sequences {
        return Err(Error::Data(format!(
            "{} sequences leave nothing after {} held out",
            corpus.len(),
            data.heldout_sequences
        )));
    }
    let (train, heldout) = corpus.split_tail(data.heldout_sequences);
    Ok((train, heldout, vocab))
}

/// Drops metric lines logged after `step`, so a resumed run does not duplicate them.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in fs::read_to_string(path)?.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["step"].as_u64().is_some_and(|s| s as usize <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn run(args: &PretrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?.resolved()?;
    let configs = cfg.run_configs()?;
    let dir = run_dir(args.out.as_deref(), &args.config);
    let ckpt_root = dir.join(CHECKPOINT_SUBDIR);
    let existing = if ckpt_root.is_dir() { list_checkpoints(&ckpt_root)? } else { Vec::new() };

    let state = match (args.resume, existing.last()) {
        (true, Some((step, path))) => {
            let snapshot = RunConfig::load(&dir.join(SNAPSHOT_FILE))?;
            if snapshot != cfg {
                return Err(Error::Config(format!("{} differs from the run's snapshot", args.config.display())));
            }
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != configs {
                return Err(Error::Config(format!("checkpoint {} was written under another config", path.display())));
            }
            truncate_metrics(&dir.join(METRICS_FILE), *step)?;
            info!("resuming {} from step {step}", dir.display());
            TrainState::from_checkpoint(ckpt)
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "{} already holds checkpoints; pass --resume or choose another --out",
                dir.display()
            )));
        }
        (_, None) => {
            let _ = fs::remove_file(dir.join(METRICS_FILE));
            TrainState::fresh(&configs)?
        }
    };

    let (train, heldout, vocab) = load_data(&cfg.data, &configs.model)?;
    fs::create_dir_all(&dir)?;
    cfg.save(&dir.join(SNAPSHOT_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    info!(
        "pretraining {} sequences, rho {}, {} steps on {} rank(s) into {}",
        train.len(),
        configs.meta.rho,
        configs.train.total_steps,
        args.world_size,
        dir.display()
    );

    let options = TrainOptions { world_size: args.world_size, out_dir: Some(dir.clone()), until: args.until };
    let outcome = hybrid_train_loop(&train, Some(&heldout), &configs, state, &options)?;
    let summary = json!({
        "run_dir": dir,
        "step": outcome.state.step,
        "final_train_loss": outcome.history.last().map(|r| r.loss),
        "checkpoints": list_checkpoints(&ckpt_root)?.len(),
    });
    println!("{summary}");
    Ok(())
}
