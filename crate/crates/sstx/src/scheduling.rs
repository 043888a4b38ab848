//! Teacher-forcing probability schedules and the optimizer learning-rate
//! schedule.
//!
//! The teacher-forcing probability t(i) is the probability that a decoder
//! input position keeps the gold token at training step i. Linear decay is
//! t(i) = max{epsilon, k - c*i}; exponential and inverse-sigmoid decay are
//! the classic scheduled-sampling alternatives, floored by the same epsilon.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Exponential,
    InverseSigmoid,
    Constant,
}

/// Decay of the teacher-forcing probability over training steps.
///
/// `epsilon` is the floor, `k` the offset (or rate constant, per kind),
/// `c` the linear slope, and `pure_tf_steps` an initial span of forced
/// probability 1 before the decay clock starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingSchedule {
    pub kind: ScheduleKind,
    pub epsilon: f64,
    pub k: f64,
    pub c: f64,
    pub pure_tf_steps: u64,
}

impl TeacherForcingSchedule {
    pub fn new(
        kind: ScheduleKind,
        epsilon: f64,
        k: f64,
        c: f64,
        pure_tf_steps: u64,
    ) -> Result<Self> {
        let s = TeacherForcingSchedule {
            kind,
            epsilon,
            k,
            c,
            pure_tf_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(p: f64) -> Result<Self> {
        TeacherForcingSchedule::new(ScheduleKind::Constant, 0.0, p, 0.0, 0)
    }

    /// Linear decay with offset `k`, slope `c` and floor `epsilon`.
    pub fn linear(k: f64, c: f64, epsilon: f64) -> Result<Self> {
        TeacherForcingSchedule::new(ScheduleKind::Linear, epsilon, k, c, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "schedule epsilon must be in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.c < 0.0 || !self.c.is_finite() {
            return Err(Error::Config(format!(
                "schedule c must be >= 0, got {}",
                self.c
            )));
        }
        if !self.k.is_finite() {
            return Err(Error::Config(format!(
                "schedule k must be finite, got {}",
                self.k
            )));
        }
        match self.kind {
            ScheduleKind::Linear => {
                if self.k <= 0.0 {
                    return Err(Error::Config(format!(
                        "linear decay needs k > 0, got {}",
                        self.k
                    )));
                }
            }
            ScheduleKind::Exponential => {
                if !(self.k > 0.0 && self.k < 1.0) {
                    return Err(Error::Config(format!(
                        "exponential decay needs 0 < k < 1, got {}",
                        self.k
                    )));
                }
            }
            ScheduleKind::InverseSigmoid => {
                if self.k < 1.0 {
                    return Err(Error::Config(format!(
                        "inverse sigmoid decay needs k >= 1, got {}",
                        self.k
                    )));
                }
            }
            ScheduleKind::Constant => {
                if !(0.0..=1.0).contains(&self.k) {
                    return Err(Error::Config(format!(
                        "constant schedule needs k in [0, 1], got {}",
                        self.k
                    )));
                }
            }
        }
        Ok(())
    }

    /// Teacher-forcing probability at training step `i`, clamped to [0, 1].
    pub fn tf_probability(&self, step: u64) -> f64 {
        if step < self.pure_tf_steps {
            return 1.0;
        }
        let j = (step - self.pure_tf_steps) as f64;
        let raw = match self.kind {
            ScheduleKind::Linear => self.epsilon.max(self.k - self.c * j),
            ScheduleKind::Exponential => self.epsilon.max(self.k.powf(j)),
            ScheduleKind::InverseSigmoid => {
                // exp overflows to inf for large j; the quotient then
                // underflows to 0 and the floor takes over.
                self.epsilon.max(self.k / (self.k + (j / self.k).exp()))
            }
            ScheduleKind::Constant => self.k,
        };
        raw.clamp(0.0, 1.0)
    }
}

/// Inverse-square-root warmup learning rate:
/// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn learning_rate(step: u64, d_model: usize, warmup_steps: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract(
            "learning_rate requires step >= 1".to_string(),
        ));
    }
    if warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be >= 1".to_string()));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_spot_values() {
        let s = TeacherForcingSchedule::linear(1.0, 1e-5, 0.1).unwrap();
        assert_eq!(s.tf_probability(0), 1.0);
        let t = s.tf_probability(50_000);
        assert!((t - 0.5).abs() < 1e-12, "got {}", t);
        assert_eq!(t, (1.0f64 - 1e-5 * 50_000.0).max(0.1));
        assert_eq!(s.tf_probability(1_000_000), 0.1);
    }

    #[test]
    fn exponential_starts_at_one() {
        let s =
            TeacherForcingSchedule::new(ScheduleKind::Exponential, 0.05, 0.9999, 0.0, 0).unwrap();
        assert_eq!(s.tf_probability(0), 1.0);
        assert!(s.tf_probability(100_000) >= 0.05);
    }

    #[test]
    fn inverse_sigmoid_decays_to_floor() {
        let s =
            TeacherForcingSchedule::new(ScheduleKind::InverseSigmoid, 0.2, 100.0, 0.0, 0).unwrap();
        let early = s.tf_probability(0);
        assert!(early > 0.9 && early < 1.0);
        assert_eq!(s.tf_probability(10_000_000), 0.2);
    }

    #[test]
    fn pure_tf_steps_gate() {
        let s = TeacherForcingSchedule::new(ScheduleKind::Linear, 0.0, 1.0, 0.5, 10).unwrap();
        for i in 0..10 {
            assert_eq!(s.tf_probability(i), 1.0);
        }
        assert_eq!(s.tf_probability(10), 1.0); // j = 0
        assert_eq!(s.tf_probability(11), 0.5);
        assert_eq!(s.tf_probability(12), 0.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(TeacherForcingSchedule::new(ScheduleKind::Linear, 1.0, 1.0, 0.0, 0).is_err());
        assert!(TeacherForcingSchedule::new(ScheduleKind::Linear, -0.1, 1.0, 0.0, 0).is_err());
        assert!(TeacherForcingSchedule::new(ScheduleKind::Exponential, 0.0, 1.5, 0.0, 0).is_err());
        assert!(
            TeacherForcingSchedule::new(ScheduleKind::InverseSigmoid, 0.0, 0.5, 0.0, 0).is_err()
        );
        assert!(TeacherForcingSchedule::new(ScheduleKind::Constant, 0.0, 1.5, 0.0, 0).is_err());
        assert!(TeacherForcingSchedule::new(ScheduleKind::Linear, 0.0, 1.0, -0.1, 0).is_err());
    }

    #[test]
    fn schedule_is_pure() {
        let s = TeacherForcingSchedule::linear(1.0, 1e-4, 0.3).unwrap();
        for i in [0u64, 3, 999, 123_456] {
            assert_eq!(s.tf_probability(i), s.tf_probability(i));
        }
    }

    #[test]
    fn noam_branches_equal_at_warmup() {
        let w = 400u64;
        let lr = learning_rate(w, 64, w, 1.0).unwrap();
        let up = (w as f64) * (w as f64).powf(-1.5);
        let down = (w as f64).powf(-0.5);
        assert!((up - down).abs() <= 1e-12);
        assert!((lr - 0.00625).abs() < 1e-15, "got {}", lr);
    }

    #[test]
    fn noam_monotone_up_then_down() {
        let w = 50u64;
        let mut prev = learning_rate(1, 32, w, 1.0).unwrap();
        for step in 2..=w {
            let lr = learning_rate(step, 32, w, 1.0).unwrap();
            assert!(lr > prev, "not increasing at {}", step);
            prev = lr;
        }
        for step in (w + 1)..(w + 50) {
            let lr = learning_rate(step, 32, w, 1.0).unwrap();
            assert!(lr < prev, "not decreasing at {}", step);
            prev = lr;
        }
    }

    #[test]
    fn noam_step_zero_rejected() {
        assert!(learning_rate(0, 64, 400, 1.0).is_err());
    }

    #[test]
    fn monotone_and_bounded_over_random_parameters() {
        use crate::rng::Rng;
        let mut rng = Rng::seed_from_u64(77);
        for _ in 0..200 {
            let kind = match rng.below(3) {
                0 => ScheduleKind::Linear,
                1 => ScheduleKind::Exponential,
                _ => ScheduleKind::InverseSigmoid,
            };
            let epsilon = rng.uniform(0.0, 0.9);
            let (k, c) = match kind {
                ScheduleKind::Linear => (rng.uniform(0.1, 1.0), rng.uniform(0.0, 1e-2)),
                ScheduleKind::Exponential => (rng.uniform(0.5, 0.99999), 0.0),
                ScheduleKind::InverseSigmoid => (rng.uniform(1.0, 500.0), 0.0),
                ScheduleKind::Constant => unreachable!(),
            };
            let pure = rng.below(100);
            let s = TeacherForcingSchedule::new(kind, epsilon, k, c, pure).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..1000u64 {
                let t = s.tf_probability(i * 10);
                assert!((0.0..=1.0).contains(&t));
                assert!(t >= epsilon, "below floor: {}", t);
                assert!(t <= prev + 1e-15, "not non-increasing");
                prev = t;
            }
        }
    }
}
