//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Learning rate at `step` of `total`: linear warm-up over `warmup` steps,
/// then constant or cosine decay to zero at `total`.
pub fn lr_at(schedule: LrSchedule, base: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_cosine() {
        assert_eq!(lr_at(LrSchedule::Constant, 1.0, 0, 10, 0), 1.0);
        assert!((lr_at(LrSchedule::Cosine, 1.0, 0, 100, 0) - 1.0).abs() < 1e-12);
        assert!((lr_at(LrSchedule::Cosine, 1.0, 50, 100, 0) - 0.5).abs() < 1e-12);
        assert!(lr_at(LrSchedule::Cosine, 1.0, 100, 100, 0).abs() < 1e-12);
        assert!((lr_at(LrSchedule::Cosine, 2.0, 4, 100, 10) - 1.0).abs() < 1e-12);
        assert!((lr_at(LrSchedule::Cosine, 2.0, 10, 100, 10) - 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let lr = lr_at(LrSchedule::Cosine, 1.0, s, 100, 10);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
