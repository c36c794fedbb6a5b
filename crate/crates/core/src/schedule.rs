//! The staged growth schedule for the kept-token rate.
//!
//! Training is split into `num_stages` equal spans of iterations. Stage 1
//! keeps a fraction `first_stage_rate` of the tokens; later stages add equal
//! increments so that the final stage reaches a rate of exactly 1.0 (all
//! tokens). The selection pipeline starts each iteration from a strided
//! subset at the *initial* rate — half the first stage's rate — and expands
//! up to the current stage's target.

use serde::Serialize;

use crate::error::{Error, Result};

/// Piecewise-constant schedule of kept-token rates over a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSchedule {
    num_stages: usize,
    first_stage_rate: f64,
    repetition_steps: usize,
}

/// Kept rate of one stage together with the expansion increment that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageRate {
    /// Fraction of tokens kept during this stage.
    pub kept_rate: f64,
    /// Increment over the previous stage (the first stage's increment is
    /// measured from the initial strided rate).
    pub expansion_rate: f64,
}

/// Resolved schedule position for one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageState {
    /// 1-based stage index.
    pub stage: usize,
    /// Kept-token rate of the stage.
    pub kept_rate: f64,
    /// Number of tokens the selection should contain at this stage.
    pub target_count: usize,
}

impl GrowthSchedule {
    /// Creates a schedule with `num_stages` stages ending at rate 1.0.
    ///
    /// `first_stage_rate` is the kept rate of stage 1; the initial strided
    /// rate is always half of it and is not configurable. `repetition_steps`
    /// is the number of rounds the parallel expansion splits each stage's
    /// additions into.
    pub fn new(num_stages: usize, first_stage_rate: f64, repetition_steps: usize) -> Result<Self> {
        if num_stages == 0 {
            return Err(Error::InvalidSchedule("num_stages must be at least 1".into()));
        }
        if !(first_stage_rate > 0.0 && first_stage_rate <= 1.0) || !first_stage_rate.is_finite() {
            return Err(Error::InvalidRate { name: "first_stage_rate", value: first_stage_rate });
        }
        if num_stages == 1 && first_stage_rate < 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "a single stage at rate {first_stage_rate} can never reach the full token set; \
                 use num_stages >= 2 or first_stage_rate = 1.0"
            )));
        }
        if repetition_steps == 0 {
            return Err(Error::InvalidSchedule("repetition_steps must be at least 1".into()));
        }
        Ok(GrowthSchedule { num_stages, first_stage_rate, repetition_steps })
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn first_stage_rate(&self) -> f64 {
        self.first_stage_rate
    }

    pub fn repetition_steps(&self) -> usize {
        self.repetition_steps
    }

    /// Rate of the strided subset selection starts from: half the first
    /// stage's rate.
    pub fn initial_rate(&self) -> f64 {
        self.first_stage_rate / 2.0
    }

    /// Kept rate and expansion increment of every stage, in stage order.
    ///
    /// Stage 1 expands from the initial rate to `first_stage_rate`; the
    /// remaining gap to 1.0 is split evenly across stages `2..=num_stages`.
    /// The last stage's rate is pinned to exactly 1.0 so downstream token
    /// counts are exact rather than within float rounding of `n`.
    pub fn stage_rates(&self) -> Vec<StageRate> {
        let r0 = self.initial_rate();
        let mut rates = Vec::with_capacity(self.num_stages);
        let mut rate = r0;
        for stage in 1..=self.num_stages {
            let expansion = if stage == 1 {
                self.first_stage_rate - r0
            } else {
                (1.0 - self.first_stage_rate) / (self.num_stages - 1) as f64
            };
            rate += expansion;
            if stage == self.num_stages {
                debug_assert!((rate - 1.0).abs() < 1e-9);
                rate = 1.0;
            }
            rates.push(StageRate { kept_rate: rate, expansion_rate: expansion });
        }
        rates
    }

    /// Maps a 1-based iteration to its 1-based stage: `⌈num_stages · t / T⌉`,
    /// computed in integer arithmetic and clamped to `1..=num_stages`.
    pub fn current_stage(&self, iteration: usize, total_iterations: usize) -> Result<usize> {
        if total_iterations == 0 || iteration == 0 || iteration > total_iterations {
            return Err(Error::IterationOutOfRange {
                iteration,
                total: total_iterations,
            });
        }
        let stage = (self.num_stages * iteration).div_ceil(total_iterations);
        Ok(stage.clamp(1, self.num_stages))
    }

    /// Per-stage selected-token targets for a sequence of `num_tokens`
    /// tokens: `⌊rate · num_tokens⌋` with a small epsilon guard so that
    /// rates which are exact in real arithmetic (e.g. 0.7 · 10) do not lose
    /// a token to float rounding. The final target is always `num_tokens`.
    pub fn stage_targets(&self, num_tokens: usize) -> Vec<usize> {
        self.stage_rates()
            .iter()
            .map(|r| (((r.kept_rate * num_tokens as f64) + 1e-9).floor() as usize).min(num_tokens))
            .collect()
    }

    /// Stage index, rate, and token target for one iteration.
    pub fn stage_state(
        &self,
        iteration: usize,
        total_iterations: usize,
        num_tokens: usize,
    ) -> Result<StageState> {
        let stage = self.current_stage(iteration, total_iterations)?;
        let rates = self.stage_rates();
        let targets = self.stage_targets(num_tokens);
        Ok(StageState {
            stage,
            kept_rate: rates[stage - 1].kept_rate,
            target_count: targets[stage - 1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn three_stage_half_rate_schedule() {
        let s = GrowthSchedule::new(3, 0.5, 2).unwrap();
        assert_abs_diff_eq!(s.initial_rate(), 0.25, epsilon = 0.0);
        let rates = s.stage_rates();
        let kept: Vec<f64> = rates.iter().map(|r| r.kept_rate).collect();
        let expansion: Vec<f64> = rates.iter().map(|r| r.expansion_rate).collect();
        for (got, want) in kept.iter().zip([0.5, 0.75, 1.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in expansion.iter().zip([0.25, 0.25, 0.25]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_eq!(kept[2], 1.0);
    }

    #[test]
    fn three_stage_point_four_schedule() {
        let s = GrowthSchedule::new(3, 0.4, 2).unwrap();
        let rates = s.stage_rates();
        let kept: Vec<f64> = rates.iter().map(|r| r.kept_rate).collect();
        let expansion: Vec<f64> = rates.iter().map(|r| r.expansion_rate).collect();
        for (got, want) in kept.iter().zip([0.4, 0.7, 1.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        for (got, want) in expansion.iter().zip([0.2, 0.3, 0.3]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn rates_are_monotone_and_end_at_one() {
        for stages in 1..=7 {
            for r1 in [0.2, 0.4, 0.5, 0.6, 1.0] {
                if stages == 1 && r1 < 1.0 {
                    continue;
                }
                let s = GrowthSchedule::new(stages, r1, 2).unwrap();
                let rates = s.stage_rates();
                assert_eq!(rates.len(), stages);
                let mut prev = s.initial_rate();
                for r in &rates {
                    assert!(r.kept_rate >= prev);
                    prev = r.kept_rate;
                }
                assert_eq!(rates.last().unwrap().kept_rate, 1.0);
                // Increments cover the whole gap from the initial rate.
                let sum: f64 = rates.iter().map(|r| r.expansion_rate).sum();
                assert_abs_diff_eq!(sum, 1.0 - s.initial_rate(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(GrowthSchedule::new(0, 0.5, 2).is_err());
        assert!(GrowthSchedule::new(3, 0.0, 2).is_err());
        assert!(GrowthSchedule::new(3, 1.5, 2).is_err());
        assert!(GrowthSchedule::new(3, f64::NAN, 2).is_err());
        assert!(GrowthSchedule::new(1, 0.5, 2).is_err());
        assert!(GrowthSchedule::new(3, 0.5, 0).is_err());
        // Degenerate but valid: one stage already at the full rate.
        let s = GrowthSchedule::new(1, 1.0, 2).unwrap();
        assert_eq!(s.stage_rates()[0].kept_rate, 1.0);
    }

    #[test]
    fn current_stage_examples() {
        let s = GrowthSchedule::new(3, 0.5, 2).unwrap();
        assert_eq!(s.current_stage(100, 300).unwrap(), 1);
        assert_eq!(s.current_stage(101, 300).unwrap(), 2);
        assert_eq!(s.current_stage(300, 300).unwrap(), 3);
        assert_eq!(s.current_stage(1, 300).unwrap(), 1);
        assert!(s.current_stage(0, 300).is_err());
        assert!(s.current_stage(301, 300).is_err());
        assert!(s.current_stage(1, 0).is_err());
    }

    #[test]
    fn current_stage_is_monotone_and_balanced() {
        let s = GrowthSchedule::new(3, 0.5, 2).unwrap();
        let total = 10;
        let stages: Vec<usize> =
            (1..=total).map(|t| s.current_stage(t, total).unwrap()).collect();
        assert_eq!(stages, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 3]);
        // Spans differ in length by at most one iteration.
        let mut counts = [0usize; 3];
        for st in stages {
            counts[st - 1] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn stage_targets_examples() {
        let s = GrowthSchedule::new(3, 0.5, 2).unwrap();
        assert_eq!(s.stage_targets(197), vec![98, 147, 197]);
        assert_eq!(s.stage_targets(4), vec![2, 3, 4]);
        // 0.7 * 10 must not round down to 6.
        let s = GrowthSchedule::new(3, 0.4, 2).unwrap();
        assert_eq!(s.stage_targets(10), vec![4, 7, 10]);
    }

    #[test]
    fn stage_state_combines_stage_and_target() {
        let s = GrowthSchedule::new(3, 0.5, 2).unwrap();
        let state = s.stage_state(150, 300, 197).unwrap();
        assert_eq!(state.stage, 2);
        assert_eq!(state.target_count, 147);
        assert_abs_diff_eq!(state.kept_rate, 0.75, epsilon = 1e-12);
    }
}
