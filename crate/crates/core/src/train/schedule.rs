use std::f64::consts::PI;

use crate::train::config::{Schedule, TrainConfig};

/// Learning rate after `step` updates: linear ramp to the peak over the
/// warmup, then decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    match cfg.schedule {
        Schedule::Cosine => cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos()),
        Schedule::Linear => cfg.peak_lr * (1.0 - progress),
    }
}
