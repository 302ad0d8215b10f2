use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use metapico_analysis::{export_report, sweep_report};
use metapico_core::data::{load_conll, NerDataset, Vocab};
use metapico_core::{Error, Result};
use metapico_ner::{evaluate_model, finetune_run, sweep_checkpoints, Backbone, DataAudit, FinetuneConfig, Tagger};

use crate::config::{RunConfig, VOCAB_FILE};
use crate::{EvalArgs, FinetuneArgs, SweepArgs, OUT_ENV};

/// Nearest `vocab.json` in `start` or one of its ancestors.
pub fn find_vocab(start: &Path) -> Result<PathBuf> {
    let abs = start.canonicalize()?;
    abs.ancestors()
        .map(|d| d.join(VOCAB_FILE))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Config(format!("no {VOCAB_FILE} above {}; pass --vocab", start.display())))
}

fn vocab_for(explicit: Option<&Path>, checkpoint: &Path) -> Result<Vocab> {
    match explicit {
        Some(p) => Vocab::load(p),
        None => Vocab::load(&find_vocab(checkpoint)?),
    }
}

fn finetune_config(path: Option<&Path>) -> Result<FinetuneConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?.finetune,
        None => FinetuneConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<NerDataset>> {
    paths.iter().map(|p| load_conll(p)).collect()
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let mut cfg = finetune_config(args.config.as_deref())?;
    cfg.regime = args.regime;
    let vocab = vocab_for(args.vocab.as_deref(), &args.checkpoint)?;
    let backbone = Backbone::load(&args.checkpoint)?;
    let train = load_conll(&args.data)?;
    let dev = args.dev.as_deref().map(load_conll).transpose()?;
    let evals = load_all(&args.eval)?;

    let out = match &args.out {
        Some(o) => o.clone(),
        None => {
            let name = args.checkpoint.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join("finetune").join(format!("{name}_{}", cfg.regime))
        }
    };
    info!("finetuning {} ({}) on {} sentences", args.checkpoint.display(), cfg.regime, train.len());
    let mut audit = DataAudit::default();
    let (tagger, report) = finetune_run(&backbone, &vocab, &train, dev.as_ref(), &cfg, &mut audit)?;
    tagger.save(&out)?;
    fs::write(out.join("finetune.json"), serde_json::to_string_pretty(&cfg)?)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if evals.is_empty() {
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let refs: Vec<&NerDataset> = evals.iter().collect();
    let mut scored = evaluate_model(&tagger, &refs, cfg.constrained, cfg.scoring, &mut audit)?;
    audit.check_zero_shot()?;
    scored.checkpoint_step = report.checkpoint_step;
    scored.regime = report.regime.clone();
    scored.seed = report.seed;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&scored)?)?;
    println!("{}", serde_json::to_string(&scored)?);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let tagger = Tagger::load(&args.checkpoint)?;
    let data = load_all(&args.data)?;
    let refs: Vec<&NerDataset> = data.iter().collect();
    let mut audit = DataAudit::default();
    let report = evaluate_model(&tagger, &refs, !args.unconstrained, args.scoring.into(), &mut audit)?;
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = finetune_config(args.config.as_deref())?;
    if let Some(r) = args.regime {
        cfg.regime = r;
    }
    let vocab = vocab_for(args.vocab.as_deref(), &args.checkpoints)?;
    let train = load_conll(&args.data)?;
    let dev = args.dev.as_deref().map(load_conll).transpose()?;
    let evals = load_all(&args.eval)?;
    let table = match &args.table {
        Some(t) => t.clone(),
        None => {
            let parent = args.checkpoints.canonicalize()?.parent().map(Path::to_path_buf).unwrap_or_default();
            parent.join(format!("sweep_{}.csv", cfg.regime))
        }
    };
    let rows = sweep_checkpoints(&args.checkpoints, &vocab, &train, dev.as_ref(), &evals, &cfg, &table)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        warn!("{failed} of {} sweep rows failed", rows.len());
    }
    let report_dir = table.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = format!("{}_report", table.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep"));
    let (csv, jsonl) = export_report(&sweep_report(&rows), &report_dir, &stem)?;
    let summary = serde_json::json!({
        "table": table,
        "rows": rows.len(),
        "failed": failed,
        "report_csv": csv,
        "report_jsonl": jsonl,
    });
    println!("{summary}");
    Ok(())
}
