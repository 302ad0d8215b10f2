//! Long-format CSV and JSONL export of analysis results.

use std::fs;
use std::path::{Path, PathBuf};

use metapico_core::{Error, Result};
use metapico_ner::SweepRow;
use serde::{Deserialize, Serialize};

/// One value per (checkpoint, dataset, metric).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub checkpoint_step: Option<usize>,
    pub dataset: String,
    pub metric: String,
    pub value: Option<f64>,
    pub note: String,
}

impl ReportRow {
    pub fn new(step: Option<usize>, dataset: impl Into<String>, metric: impl Into<String>, value: Option<f64>) -> Self {
        Self { checkpoint_step: step, dataset: dataset.into(), metric: metric.into(), value, note: String::new() }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// Sweep table cells in long format: one row per (step, eval dataset, F1 metric).
pub fn sweep_report(rows: &[SweepRow]) -> Vec<ReportRow> {
    rows.iter()
        .flat_map(|r| {
            let note = format!("{} from {}; {}", r.regime, r.source, r.status);
            [("micro_f1", r.micro_f1), ("per_f1", r.per_f1), ("loc_f1", r.loc_f1), ("org_f1", r.org_f1)]
                .into_iter()
                .map(move |(m, v)| ReportRow::new(Some(r.step), r.eval_id.clone(), m, v).with_note(note.clone()))
        })
        .collect()
}

fn data_err(e: impl std::fmt::Display) -> Error {
    Error::Data(e.to_string())
}

/// Writes `<stem>.csv` and `<stem>.jsonl` under `dir` and returns both paths.
pub fn export_report(rows: &[ReportRow], dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Data("nothing to export".into()));
    }
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(data_err)?;
    for r in rows {
        w.serialize(r).map_err(data_err)?;
    }
    w.flush()?;
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&jsonl_path, text)?;
    Ok((csv_path, jsonl_path))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(data_err)?;
    r.deserialize().map(|x| x.map_err(data_err)).collect()
}

pub fn read_report_jsonl(path: &Path) -> Result<Vec<ReportRow>> {
    fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
