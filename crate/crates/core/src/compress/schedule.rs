use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Densities are tracked in basis points (10000 = 100%) so schedule
/// arithmetic such as 35 - 2.5 is exact.
pub const FULL_DENSITY_BP: u32 = 10_000;

/// Convert a percentage with at most two decimals to basis points.
pub fn percent_to_bp(percent: f64) -> Result<u32> {
    let bp = percent * 100.0;
    if !(0.0..=FULL_DENSITY_BP as f64).contains(&bp) || (bp - bp.round()).abs() > 1e-6 {
        return Err(Error::config(format!("{percent}% is not a density with two-decimal precision")));
    }
    Ok(bp.round() as u32)
}

pub fn bp_to_fraction(bp: u32) -> f64 {
    bp as f64 / FULL_DENSITY_BP as f64
}

/// One regime of the schedule: remove `step` percentage points per stage
/// until density reaches `floor` percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub step: f64,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPruneSchedule {
    pub stages: Vec<ScheduleStage>,
}

impl Default for WeightPruneSchedule {
    fn default() -> Self {
        let stages = [(20.0, 80.0), (10.0, 50.0), (5.0, 35.0), (2.5, 30.0), (1.0, 10.0), (0.5, 5.0)]
            .into_iter()
            .map(|(step, floor)| ScheduleStage { step, floor })
            .collect();
        Self { stages }
    }
}

impl WeightPruneSchedule {
    fn regimes(&self) -> Result<Vec<(u32, u32)>> {
        self.stages
            .iter()
            .map(|s| Ok((percent_to_bp(s.step)?, percent_to_bp(s.floor)?)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let regimes = self.regimes()?;
        if regimes.is_empty() {
            return Err(Error::config("weight pruning schedule is empty"));
        }
        if regimes.iter().any(|&(step, _)| step == 0) {
            return Err(Error::config("schedule steps must be positive"));
        }
        if regimes.windows(2).any(|w| w[1].1 >= w[0].1) || regimes[0].1 >= FULL_DENSITY_BP {
            return Err(Error::config("schedule floors must be strictly decreasing below 100%"));
        }
        Ok(())
    }

    /// Terminal floor, in basis points.
    pub fn stop_bp(&self) -> Result<u32> {
        self.validate()?;
        Ok(self.regimes()?.last().expect("validated").1)
    }

    /// Density after one more prune stage from `current_bp`, or `None` at
    /// the stop density. The active regime is the first whose floor lies
    /// below the current density; the step is clamped at that floor.
    pub fn next_target(&self, current_bp: u32) -> Result<Option<u32>> {
        self.validate()?;
        Ok(self
            .regimes()?
            .into_iter()
            .find(|&(_, floor)| floor < current_bp)
            .map(|(step, floor)| current_bp.saturating_sub(step).max(floor)))
    }

    /// Every density visited from 100% down to the stop density.
    pub fn trace_bp(&self) -> Result<Vec<u32>> {
        let mut trace = vec![FULL_DENSITY_BP];
        while let Some(next) = self.next_target(*trace.last().expect("non-empty"))? {
            trace.push(next);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_targets_follow_the_regimes() {
        let s = WeightPruneSchedule::default();
        assert_eq!(s.next_target(10_000).unwrap(), Some(8_000));
        assert_eq!(s.next_target(8_000).unwrap(), Some(7_000));
        assert_eq!(s.next_target(5_000).unwrap(), Some(4_500));
        assert_eq!(s.next_target(3_500).unwrap(), Some(3_250));
        assert_eq!(s.next_target(500).unwrap(), None);
    }

    #[test]
    fn clamps_at_floor() {
        let s = WeightPruneSchedule {
            stages: vec![ScheduleStage { step: 30.0, floor: 50.0 }],
        };
        assert_eq!(s.trace_bp().unwrap(), vec![10_000, 7_000, 5_000]);
    }

    #[test]
    fn rejects_bad_schedules() {
        let bad = |stages: Vec<(f64, f64)>| WeightPruneSchedule {
            stages: stages.into_iter().map(|(step, floor)| ScheduleStage { step, floor }).collect(),
        };
        assert!(bad(vec![]).validate().is_err());
        assert!(bad(vec![(10.0, 50.0), (5.0, 60.0)]).validate().is_err());
        assert!(bad(vec![(0.0, 50.0)]).validate().is_err());
        assert!(bad(vec![(0.001, 50.0)]).validate().is_err());
    }
}
