//! Measurements over training runs and tuned checkpoints: convergence
//! descriptors, spectra, linguistic-anchor statistics, token confidences and
//! cross-model surprisal deltas.

pub mod anchors;
pub mod confidence;
pub mod convergence;
pub mod delta;
pub mod report;
pub mod spectra;

pub use anchors::{default_particles, oov_rate, particle_recall};
pub use confidence::{confidence_csv, token_confidence_series, top_words, ConfidenceSeries, Split};
pub use convergence::{
    convergence, convergence_deltas, initial_slope, macro_mean, normalized_auc, t90, Convergence, ConvergenceDeltas,
    LossCurve, NormalizedAuc, DEFAULT_SLOPE_POINTS,
};
pub use delta::{delta_from_marginals, delta_logprob};
pub use report::{export_report, read_report_csv, read_report_jsonl, sweep_report, ReportRow};
pub use spectra::{decoder_spectra, effective_rank_proportional};
