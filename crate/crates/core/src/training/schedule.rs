use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate at optimizer step `step`: a linear ramp from 0 to `base_lr`
/// over the warmup epochs, then a half-cosine down to 0 at the last step.
/// Steps past the horizon stay at 0.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.total_epochs * steps_per_epoch;
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step >= total { 0.0 } else { base };
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    if progress >= 1.0 {
        return 0.0;
    }
    base * 0.5 * (1.0 + (PI * progress).cos())
}
