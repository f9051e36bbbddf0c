//! Cosine coefficient schedules for the auxiliary loss terms, and the
//! per-step loss breakdown logged by the trainer.

use serde::{Deserialize, Serialize};

/// Endpoints of the cosine schedules for the step-level and Siamese loss
/// coefficients over a fixed number of epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSchedule {
    pub lambda_stl_start: f64,
    pub lambda_stl_end: f64,
    pub lambda_sia_start: f64,
    pub lambda_sia_end: f64,
    pub total_epochs: usize,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule {
            lambda_stl_start: 1.0,
            lambda_stl_end: 0.1,
            lambda_sia_start: 0.1,
            lambda_sia_end: 0.5,
            total_epochs: 300,
        }
    }
}

fn cosine_between(start: f64, end: f64, epoch: usize, total: usize) -> f64 {
    // Exact at the endpoints by construction.
    if epoch == 0 {
        return start;
    }
    if epoch >= total {
        return end;
    }
    let progress = epoch as f64 / total as f64;
    end + (start - end) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Coefficients `(lambda_stl, lambda_sia)` at a given epoch: each follows a
/// cosine curve from its start value to its end value.
pub fn lambda_at(schedule: &LossSchedule, epoch: usize) -> (f64, f64) {
    let e = schedule.total_epochs.max(1);
    (
        cosine_between(schedule.lambda_stl_start, schedule.lambda_stl_end, epoch, e),
        cosine_between(schedule.lambda_sia_start, schedule.lambda_sia_end, epoch, e),
    )
}

/// The logged composition of one training loss evaluation. `total` is always
/// `wsl + lambda_stl * stl + lambda_sia * sia`, computed in that order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub wsl: f64,
    pub stl: f64,
    pub sia: f64,
    pub lambda_stl: f64,
    pub lambda_sia: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(wsl: f64, stl: f64, sia: f64, lambda_stl: f64, lambda_sia: f64) -> Self {
        LossBreakdown {
            wsl,
            stl,
            sia,
            lambda_stl,
            lambda_sia,
            total: wsl + lambda_stl * stl + lambda_sia * sia,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = LossSchedule {
            lambda_stl_start: 0.731,
            lambda_stl_end: 0.123,
            lambda_sia_start: 0.017,
            lambda_sia_end: 0.593,
            total_epochs: 37,
        };
        let (stl0, sia0) = lambda_at(&s, 0);
        assert_eq!(stl0, 0.731);
        assert_eq!(sia0, 0.017);
        let (stl_e, sia_e) = lambda_at(&s, 37);
        assert_eq!(stl_e, 0.123);
        assert_eq!(sia_e, 0.593);
    }

    #[test]
    fn midpoint_is_the_average() {
        let s = LossSchedule {
            lambda_stl_start: 1.0,
            lambda_stl_end: 0.1,
            lambda_sia_start: 0.2,
            lambda_sia_end: 0.6,
            total_epochs: 10,
        };
        let (stl, sia) = lambda_at(&s, 5);
        assert!((stl - 0.55).abs() < 1e-12);
        assert!((sia - 0.4).abs() < 1e-12);
    }

    #[test]
    fn curve_is_monotone_between_endpoints() {
        let s = LossSchedule { total_epochs: 50, ..LossSchedule::default() };
        let mut prev = lambda_at(&s, 0);
        for e in 1..=50 {
            let cur = lambda_at(&s, e);
            assert!(cur.0 <= prev.0 + 1e-12, "stl decays");
            assert!(cur.1 >= prev.1 - 1e-12, "sia grows");
            prev = cur;
        }
    }

    #[test]
    fn breakdown_identity() {
        let b = LossBreakdown::new(0.5, 0.3, 0.1, 1.0, 0.2);
        assert_eq!(b.total, 0.5 + 1.0 * 0.3 + 0.2 * 0.1);
        assert!((b.total - 0.82).abs() < 1e-12);
    }
}
