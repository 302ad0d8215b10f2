//! Hybrid autoregressive / meta-learning pretraining.

pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod head;
pub mod metrics;
pub mod schedule;
pub mod trainer;
pub mod update;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use checkpoint::{
    checkpoint_dir, checkpoint_steps, load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest,
    RunConfigs, TensorEntry, TrainStreams,
};
pub use config::{MetaConfig, Schedule, TrainConfig};
pub use head::{mix_seed, DropoutKey, EpisodeHead};
pub use metrics::{head_weight_stats, heldout_loss, log_step_metrics, Branch, MetricsRecord, StepSummary};
pub use schedule::lr_at;
pub use trainer::{
    hybrid_train_loop, StepRecord, TrainOptions, TrainOutcome, TrainState, CHECKPOINT_SUBDIR, METRICS_FILE,
};
pub use update::{
    adapt_head, ar_update, episode_features, maml_episode_update, maml_shard_update, query_loss, EpisodeStats,
};
