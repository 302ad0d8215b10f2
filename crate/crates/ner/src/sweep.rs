//! Finetune-and-evaluate over every checkpoint of a pretraining run, with an
//! append-only CSV table so interrupted sweeps resume where they stopped.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use metapico_core::data::ner::{EntityType, NerDataset};
use metapico_core::data::Vocab;
use metapico_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::finetune::{evaluate_model, finetune_run, DataAudit, FinetuneConfig};
use crate::tagger::Backbone;

pub const SWEEP_HEADER: [&str; 11] = [
    "step",
    "regime",
    "source",
    "eval_id",
    "micro_f1",
    "per_f1",
    "loc_f1",
    "org_f1",
    "final_train_loss",
    "epochs",
    "status",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub step: usize,
    pub regime: String,
    pub source: String,
    pub eval_id: String,
    pub micro_f1: Option<f64>,
    pub per_f1: Option<f64>,
    pub loc_f1: Option<f64>,
    pub org_f1: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub epochs: Option<usize>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl SweepRow {
    fn key(&self) -> (usize, String, String, String) {
        (self.step, self.regime.clone(), self.source.clone(), self.eval_id.clone())
    }
}

/// Step-indexed checkpoint directories (`step_NNNNNN`) under `root`, ascending.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(usize, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|s| s.parse().ok());
        if let (Some(step), true) = (step, path.is_dir()) {
            out.push((step, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no step_* checkpoints under {}", root.display())));
    }
    Ok(out)
}

pub fn read_table(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))).collect()
}

fn append_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if fresh {
        w.write_record(SWEEP_HEADER).map_err(|e| Error::Data(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    // One write per checkpoint keeps the table free of partial cells.
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&bytes)?;
    f.sync_data()?;
    Ok(())
}

/// Runs `finetune_run` then `evaluate_model` for every checkpoint under
/// `root`, one row per (checkpoint, eval dataset). Rows already present in
/// `table` are reused. A checkpoint that fails to load or train gets
/// `failed` rows and the sweep moves on.
pub fn sweep_checkpoints(
    root: &Path,
    vocab: &Vocab,
    train: &NerDataset,
    dev: Option<&NerDataset>,
    evals: &[NerDataset],
    cfg: &FinetuneConfig,
    table: &Path,
) -> Result<Vec<SweepRow>> {
    if evals.is_empty() {
        return Err(Error::Config("a sweep needs at least one evaluation dataset".into()));
    }
    let regime = cfg.regime.to_string();
    let mut rows = read_table(table)?;
    let done: BTreeSet<_> = rows.iter().map(SweepRow::key).collect();
    for (step, dir) in list_checkpoints(root)? {
        let keys: Vec<_> = evals.iter().map(|e| (step, regime.clone(), cfg.source.clone(), e.id.clone())).collect();
        if keys.iter().all(|k| done.contains(k)) {
            continue;
        }
        let row = |eval_id: &str| SweepRow {
            step,
            regime: regime.clone(),
            source: cfg.source.clone(),
            eval_id: eval_id.to_string(),
            micro_f1: None,
            per_f1: None,
            loc_f1: None,
            org_f1: None,
            final_train_loss: None,
            epochs: None,
            status: "ok".into(),
        };
        let outcome = (|| {
            let backbone = Backbone::load(&dir)?;
            let mut audit = DataAudit::default();
            let (tagger, tuned) = finetune_run(&backbone, vocab, train, dev, cfg, &mut audit)?;
            let refs: Vec<&NerDataset> = evals.iter().collect();
            let report = evaluate_model(&tagger, &refs, cfg.constrained, cfg.scoring, &mut audit)?;
            audit.check_zero_shot()?;
            Ok::<_, Error>((tuned, report))
        })();
        let new: Vec<SweepRow> = match outcome {
            Ok((tuned, report)) => evals
                .iter()
                .map(|e| {
                    let s = &report.datasets[&e.id];
                    SweepRow {
                        micro_f1: Some(s.micro.f1),
                        per_f1: Some(s.type_f1(EntityType::Per)),
                        loc_f1: Some(s.type_f1(EntityType::Loc)),
                        org_f1: Some(s.type_f1(EntityType::Org)),
                        final_train_loss: tuned.final_train_loss,
                        epochs: tuned.epochs,
                        ..row(&e.id)
                    }
                })
                .collect(),
            Err(e) => {
                eprintln!("warning: checkpoint {} skipped: {e}", dir.display());
                let reason = e.to_string().replace(['\n', ','], " ");
                evals.iter().map(|ev| SweepRow { status: format!("failed: {reason}"), ..row(&ev.id) }).collect()
            }
        };
        append_rows(table, &new)?;
        rows.extend(new);
    }
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(rows)
}
