//! The `metapico` command line: pretraining, finetuning, evaluation,
//! checkpoint sweeps, synthetic data and analysis.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use metapico_core::Error;
use metapico_ner::{Regime, Scoring};

pub mod analyze;
pub mod config;
pub mod gendata;
pub mod pretrain;
pub mod tagging;

pub use config::{AnalysisConfig, DataConfig, ModelSpec, RunConfig, SNAPSHOT_FILE, VOCAB_FILE};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "METAPICO_OUT";
/// Environment variable holding the log filter (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "METAPICO_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "metapico", version, about = "Hybrid autoregressive / meta-learning pretraining and NER transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Hybrid pretraining from a run config.
    Pretrain(PretrainArgs),
    /// Finetune a CRF tagger on top of a pretraining checkpoint.
    Finetune(FinetuneArgs),
    /// Score a finetuned tagger on one or more datasets.
    Eval(EvalArgs),
    /// Finetune and evaluate every checkpoint of a run.
    Sweep(SweepArgs),
    /// Write synthetic pretraining or NER data.
    GenData(GenDataArgs),
    /// Metrics over curves, datasets and checkpoints.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Number of simulated data-parallel ranks.
    #[arg(long, default_value_t = 1)]
    pub world_size: usize,
    /// Run directory; defaults to `$METAPICO_OUT/<config stem>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed updates.
    #[arg(long)]
    pub until: Option<usize>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoringArg {
    Span,
    Token,
}

impl From<ScoringArg> for Scoring {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::Span => Scoring::Span,
            ScoringArg::Token => Scoring::Token,
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Pretraining checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training data (CoNLL).
    #[arg(long)]
    pub data: PathBuf,
    /// Model-selection data; a tenth of `--data` is held out when absent.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Regime,
    /// Run config whose `finetune` section supplies the remaining settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary; found by searching the checkpoint's parent directories when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Zero-shot evaluation sets scored after tuning.
    #[arg(long, num_args = 1..)]
    pub eval: Vec<PathBuf>,
    /// Output directory for the tagger and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Finetuned tagger directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Decode without the IOB2 transition constraint.
    #[arg(long)]
    pub unconstrained: bool,
    #[arg(long, value_enum, default_value_t = ScoringArg::Span)]
    pub scoring: ScoringArg,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Directory holding `step_NNNNNN` checkpoints.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub eval: Vec<PathBuf>,
    /// Overrides the config's regime.
    #[arg(long, value_parser = parse_regime)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Sweep table; defaults to `sweep_<regime>.csv` next to the checkpoint directory.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(subcommand)]
    pub kind: GenDataKind,
}

#[derive(Subcommand, Debug)]
pub enum GenDataKind {
    /// Packed pretraining sequences plus their vocabulary.
    Corpus {
        #[arg(long, default_value_t = 256)]
        vocab_size: usize,
        #[arg(long, default_value_t = 4000)]
        sequences: usize,
        /// Ids per packed sequence (context length + 1).
        #[arg(long, default_value_t = 33)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory receiving `corpus.jsonl` and `vocab.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Particle-anchored NER sentences in CoNLL format.
    Ner {
        #[arg(long, default_value_t = 400)]
        sentences: usize,
        #[arg(long, default_value_t = 1.0)]
        particle_rate: f64,
        #[arg(long, value_enum, default_value_t = LexiconArg::Source)]
        lexicon: LexiconArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LexiconArg {
    Source,
    Dialect,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub metric: Metric,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    /// JSONL file with a `step` and a numeric value per line.
    #[arg(long)]
    pub curve: PathBuf,
    #[arg(long, default_value = "train_loss")]
    pub field: String,
}

#[derive(Subcommand, Debug)]
pub enum Metric {
    /// Step at which the curve first reaches 90% of its total descent.
    T90(CurveArgs),
    /// Normalised area under the curve.
    Auc(CurveArgs),
    /// Least-squares slope over the first k points.
    Slope {
        #[command(flatten)]
        curve: CurveArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Share of PER spans directly preceded by a case particle.
    ParticleRecall {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated particle list.
        #[arg(long, value_delimiter = ',')]
        particles: Option<Vec<String>>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Token out-of-vocabulary rate.
    Oov {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Proportional effective rank of the monitored decoder matrices.
    Per {
        /// Pretraining checkpoint or finetuned tagger directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-word gold-tag confidence across finetuned taggers, as CSV.
    Confidence {
        #[arg(long = "tagger", num_args = 1.., required = true)]
        taggers: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token surprisal change of the gold tag from tagger A to tagger B, as CSV.
    Delta {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn kind(code: i32) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        EXIT_NUMERIC => "numeric",
        _ => "data",
    }
}

/// One JSON object on a single line, e.g. `{"error":"data","code":2,"reason":"..."}`.
pub fn error_line(code: i32, reason: &str) -> String {
    let reason = reason.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind(code), "code": code, "reason": reason }).to_string()
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).format_target(false).try_init();
}

pub fn dispatch(cli: Cli) -> metapico_core::Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain::run(&a),
        Command::Finetune(a) => tagging::finetune(&a),
        Command::Eval(a) => tagging::eval(&a),
        Command::Sweep(a) => tagging::sweep(&a),
        Command::GenData(a) => gendata::run(&a.kind),
        Command::Analyze(a) => analyze::run(&a.metric),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let _ = e.print();
            let first =
                e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line(EXIT_USAGE, &first));
            return EXIT_USAGE;
        }
    };
    init_logging();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(code, &e.to_string()));
            code
        }
    }
}
