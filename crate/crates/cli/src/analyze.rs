use std::fs;
use std::path::Path;

use log::warn;
use metapico_analysis::{
    confidence_csv, decoder_spectra, delta_logprob, initial_slope, normalized_auc, oov_rate, particle_recall, t90,
    token_confidence_series, LossCurve,
};
use metapico_core::data::{load_conll, Vocab};
use metapico_core::model::Decoder;
use metapico_core::{Error, Result};
use metapico_ner::{Backbone, Tagger, TAGGER_MANIFEST};

use crate::config::{AnalysisConfig, RunConfig};
use crate::{CurveArgs, Metric};

fn analysis_config(path: Option<&Path>) -> Result<AnalysisConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?.analysis),
        None => Ok(AnalysisConfig::default()),
    }
}

fn curve(args: &CurveArgs) -> Result<LossCurve> {
    LossCurve::from_metrics_jsonl(&args.curve, &args.field)
}

/// Integral values print without a fractional part, so a step prints as `300`.
fn number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn optional(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), number)
}

/// Checkpoint step encoded in a `step_NNNNNN` path component, if any.
pub fn step_of(id: &str) -> Option<usize> {
    let at = id.rfind("step_")?;
    let digits: String = id[at + 5..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(metric: &Metric) -> Result<()> {
    match metric {
        Metric::T90(c) => println!("{}", number(t90(&curve(c)?)?)),
        Metric::Auc(c) => {
            let auc = normalized_auc(&curve(c)?)?;
            if auc.degenerate {
                warn!("constant curve; area reported as 0");
            }
            println!("{}", number(auc.value));
        }
        Metric::Slope { curve: c, k, config } => {
            let k = match k {
                Some(k) => *k,
                None => analysis_config(config.as_deref())?.slope_k,
            };
            println!("{}", initial_slope(&curve(c)?, k)?);
        }
        Metric::ParticleRecall { data, particles, config } => {
            let particles = match particles {
                Some(p) => p.clone(),
                None => analysis_config(config.as_deref())?.particles,
            };
            println!("{}", optional(particle_recall(&load_conll(data)?, &particles)));
        }
        Metric::Oov { data, vocab } => println!("{}", oov_rate(&load_conll(data)?, &Vocab::load(vocab)?)?),
        Metric::Per { checkpoint } => {
            let spectra = if checkpoint.join(TAGGER_MANIFEST).is_file() {
                let t = Tagger::load(checkpoint)?;
                decoder_spectra(&t.decoder, &t.store)?
            } else {
                let b = Backbone::load(checkpoint)?;
                decoder_spectra(&Decoder::attach(b.config.clone(), &b.store)?, &b.store)?
            };
            println!("{}", serde_json::to_string(&spectra)?);
        }
        Metric::Confidence { taggers, data, top_n, config, out } => {
            let top_n = match top_n {
                Some(n) => *n,
                None => analysis_config(config.as_deref())?.top_n,
            };
            let loaded = taggers.iter().map(|p| Tagger::load(p)).collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(usize, &Tagger)> =
                loaded.iter().enumerate().map(|(i, t)| (step_of(&t.backbone_id).unwrap_or(i), t)).collect();
            let series = token_confidence_series(&pairs, &load_conll(data)?, top_n)?;
            emit(&confidence_csv(&series), out.as_deref())?;
        }
        Metric::Delta { a, b, data, out } => {
            let (a, b) = (Tagger::load(a)?, Tagger::load(b)?);
            let data = load_conll(data)?;
            if data.is_empty() {
                return Err(Error::Data(format!("{} has no sentences", data.id)));
            }
            let mut rows = vec![["sentence", "position", "word", "gold", "delta"].map(String::from).to_vec()];
            for (i, s) in data.sentences.iter().enumerate() {
                for (t, d) in delta_logprob(&a, &b, s)?.into_iter().enumerate() {
                    rows.push(vec![
                        i.to_string(),
                        t.to_string(),
                        s.words[t].clone(),
                        s.tags[t].to_string(),
                        d.to_string(),
                    ]);
                }
            }
            emit(&csv_text(rows)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn csv_text(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_from_checkpoint_ids() {
        assert_eq!(step_of("runs/a/checkpoints/step_000300"), Some(300));
        assert_eq!(step_of("/x/step_12/"), Some(12));
        assert_eq!(step_of("random"), None);
    }

    #[test]
    fn numbers_print_compactly() {
        assert_eq!(number(300.0), "300");
        assert_eq!(number(0.25), "0.25");
        assert_eq!(optional(None), "null");
    }
}
