//! Masking schedules on the discretized time grid.
//!
//! Time runs over t in [0, 1] with keep probability alpha(t): alpha(0) = 1
//! (nothing masked) down to alpha(1) = 0 (everything masked). A run with T
//! steps walks the grid t(i) = i/T; step i moves from t(i) to s(i) = (i-1)/T,
//! revealing each still-masked position independently with probability
//! (alpha_s - alpha_t) / (1 - alpha_t).
//!
//! [`unmask_counts`] is the companion integer schedule: cumulative unmask
//! targets for samplers that reveal a fixed number of positions per step
//! instead of flipping coins.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// alpha(t) = 1 - t.
    Linear,
    /// alpha(t) = cos(pi t / 2).
    Cosine,
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Number of grid steps T >= 1.
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(NoiseSchedule { kind, steps })
    }

    /// Keep probability at continuous time `t` in [0, 1]. The endpoints are
    /// pinned to exactly 1 and 0 so that boundary identities hold without
    /// floating-point slop (cos(pi/2) is only approximately zero).
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("time {t} outside [0, 1]")));
        }
        if t == 0.0 {
            return Ok(1.0);
        }
        if t == 1.0 {
            return Ok(0.0);
        }
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::Cosine => (std::f64::consts::PI * t / 2.0).cos(),
        })
    }

    /// Grid time t(i) = i / T for i in 0..=T.
    pub fn t_of(&self, i: usize) -> Result<f64> {
        if i > self.steps {
            return Err(Error::OutOfRange(format!(
                "step index {i} out of range for {} steps",
                self.steps
            )));
        }
        Ok(i as f64 / self.steps as f64)
    }

    /// Source time s(i) = (i-1) / T of step i in 1..=T.
    pub fn s_of(&self, i: usize) -> Result<f64> {
        if i == 0 {
            return Err(Error::OutOfRange("step index 0 has no source time".into()));
        }
        self.t_of(i - 1)
    }

    /// Probability that a position masked at t(i) becomes revealed at s(i):
    /// (alpha_s - alpha_t) / (1 - alpha_t). Defined for i in 1..=T; at i = 1
    /// it equals 1 exactly because alpha(0) = 1.
    pub fn reveal_weight(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.steps {
            return Err(Error::OutOfRange(format!(
                "step index {i} outside 1..={}",
                self.steps
            )));
        }
        let a_t = self.alpha(self.t_of(i)?)?;
        let a_s = self.alpha(self.s_of(i)?)?;
        Ok((a_s - a_t) / (1.0 - a_t))
    }
}

/// Cumulative unmask targets n_1..n_T for a sequence of `len` positions:
/// n_i = round(len * (1 - cos(pi i / (2 T)))), clamped to be non-decreasing,
/// with n_T forced to `len` so every run terminates fully revealed.
pub fn unmask_counts(len: usize, steps: usize) -> Result<Vec<usize>> {
    if len == 0 || steps == 0 {
        return Err(Error::invalid("unmask_counts needs len >= 1 and steps >= 1"));
    }
    let mut counts = Vec::with_capacity(steps);
    let mut prev = 0usize;
    for i in 1..=steps {
        let raw = len as f64 * (1.0 - (std::f64::consts::PI * i as f64 / (2.0 * steps as f64)).cos());
        let mut n = raw.round() as usize;
        n = n.clamp(prev, len);
        counts.push(n);
        prev = n;
    }
    counts[steps - 1] = len;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_endpoints_are_exact() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let sch = NoiseSchedule::new(kind, 5).unwrap();
            assert_eq!(sch.alpha(0.0).unwrap(), 1.0);
            assert_eq!(sch.alpha(1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn alpha_known_values() {
        let lin = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        assert!((lin.alpha(0.25).unwrap() - 0.75).abs() < 1e-15);
        let cos = NoiseSchedule::new(ScheduleKind::Cosine, 4).unwrap();
        assert!((cos.alpha(0.5).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn alpha_rejects_out_of_range_time() {
        let sch = NoiseSchedule::new(ScheduleKind::Linear, 2).unwrap();
        assert!(sch.alpha(-0.1).is_err());
        assert!(sch.alpha(1.1).is_err());
    }

    #[test]
    fn linear_reveal_weight_is_one_over_i() {
        let sch = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        for i in 1..=4 {
            let w = sch.reveal_weight(i).unwrap();
            assert!((w - 1.0 / i as f64).abs() < 1e-14, "i = {i}, w = {w}");
        }
    }

    #[test]
    fn first_step_reveal_weight_is_exactly_one() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 3, 15] {
                let sch = NoiseSchedule::new(kind, steps).unwrap();
                assert_eq!(sch.reveal_weight(1).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn reveal_weight_bounds_checked() {
        let sch = NoiseSchedule::new(ScheduleKind::Cosine, 3).unwrap();
        assert!(sch.reveal_weight(0).is_err());
        assert!(sch.reveal_weight(4).is_err());
    }

    #[test]
    fn mask_probability_telescopes_to_zero() {
        // Product over steps of (1 - alpha_s)/(1 - alpha_t), walked from the
        // fully-masked end down to t = 0, is the survival probability of a
        // mask; it must hit exactly zero because alpha(0) = 1.
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let sch = NoiseSchedule::new(kind, 6).unwrap();
            let mut product = 1.0;
            for i in (1..=6).rev() {
                let a_t = sch.alpha(sch.t_of(i).unwrap()).unwrap();
                let a_s = sch.alpha(sch.s_of(i).unwrap()).unwrap();
                product *= (1.0 - a_s) / (1.0 - a_t);
                let expect = 1.0 - a_s;
                assert!(
                    (product - expect / (1.0 - sch.alpha(1.0).unwrap())).abs() < 1e-12,
                    "partial product at step {i}"
                );
            }
            assert_eq!(product, 0.0);
        }
    }

    #[test]
    fn unmask_counts_single_step_reveals_everything() {
        assert_eq!(unmask_counts(4, 1).unwrap(), vec![4]);
    }

    #[test]
    fn unmask_counts_known_values() {
        // 8 * (1 - cos(pi/4)) = 2.34.., rounds to 2; final step forced to 8.
        assert_eq!(unmask_counts(8, 2).unwrap(), vec![2, 8]);
    }

    #[test]
    fn unmask_counts_rejects_empty() {
        assert!(unmask_counts(0, 3).is_err());
        assert!(unmask_counts(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn prop_alpha_non_increasing_on_grid(steps in 1usize..40) {
            for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
                let sch = NoiseSchedule::new(kind, steps).unwrap();
                let mut prev = f64::INFINITY;
                for i in 0..=steps {
                    let a = sch.alpha(sch.t_of(i).unwrap()).unwrap();
                    prop_assert!(a <= prev);
                    prop_assert!((0.0..=1.0).contains(&a));
                    prev = a;
                }
            }
        }

        #[test]
        fn prop_unmask_counts_monotone_and_complete(len in 1usize..200, steps in 1usize..40) {
            let counts = unmask_counts(len, steps).unwrap();
            prop_assert_eq!(counts.len(), steps);
            let mut prev = 0usize;
            for &n in &counts {
                prop_assert!(n >= prev);
                prop_assert!(n <= len);
                prev = n;
            }
            prop_assert_eq!(*counts.last().unwrap(), len);
        }
    }
}
