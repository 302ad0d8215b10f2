//! Linear-chain CRF tagging head over decoder states, span scoring, and the
//! finetune / zero-shot evaluation protocol.

pub mod crf;
pub mod finetune;
pub mod scheme;
pub mod spans;
pub mod sweep;
pub mod tagger;

pub use crf::{
    crf_nll, log_partition, marginals, path_score, posteriors, viterbi_decode, CrfParams, Posteriors, Transitions,
};
pub use finetune::{evaluate_model, finetune_run, DataAudit, EarlyStopping, EvalReport, FinetuneConfig, Regime};
pub use scheme::TagScheme;
pub use spans::{
    micro_f1, per_type_f1, score_tags, spans_from_bio, spans_from_strs, token_f1, EvalScores, Prf, Scoring, Span,
    TypeScore,
};
pub use sweep::{list_checkpoints, read_table, sweep_checkpoints, SweepRow, SWEEP_HEADER};
pub use tagger::{Backbone, CrfHead, Tagger, TAGGER_MANIFEST, TAGGER_WEIGHTS};
