//! Linear warm-up followed by polynomial decay.

use crate::error::{Error, Result};

pub const DECAY_POWER: f64 = 0.9;

/// Number of warm-up steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1))
}

/// Learning rate at `step ∈ [0, total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, max_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!("step {step} outside [0, {total_steps})")));
    }
    let w = warmup_steps(total_steps, warmup_fraction);
    if step < w {
        return Ok(max_lr * step as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    Ok(max_lr * (1.0 - progress).powf(DECAY_POWER))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let total = 10_000;
        let w = warmup_steps(total, 0.05);
        assert_eq!(w, 500);
        assert_eq!(lr_at(w, total, 0.05, 0.05).unwrap(), 0.05);
        assert_eq!(lr_at(w / 2, total, 0.05, 0.05).unwrap(), 0.025);
        assert_eq!(lr_at(0, total, 0.05, 0.05).unwrap(), 0.0);
        assert!(lr_at(total - 1, total, 0.05, 0.05).unwrap() < 1e-3 * 0.05);
        assert!(lr_at(total, total, 0.05, 0.05).is_err());
    }

    #[test]
    fn no_warmup_starts_at_max() {
        assert_eq!(lr_at(0, 300, 0.01, 0.0).unwrap(), 0.01);
    }
}
