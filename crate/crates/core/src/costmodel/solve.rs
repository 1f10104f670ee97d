//! Schedule-averaged cost and the budget-to-ratio bisection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{step_flops, CostOptions, UNetTopology};
use crate::dsap::{build_schedule, ScheduleOptions, StepSchedule};
use crate::error::{Error, Result};

/// Relative distance between the achieved average and the target at which
/// the bisection stops.
pub const SOLVER_REL_TOLERANCE: f64 = 1e-3;

/// Largest representable ratio below 1; every non-exempt block keeps one token.
const FLOOR_RATIO: f64 = 1.0 - f64::EPSILON;

const MAX_BISECTIONS: usize = 200;

/// Mean per-step cost of `schedule`. Steps sharing an exempt set and ratio are
/// costed once.
pub fn schedule_average_flops(topology: &UNetTopology, schedule: &StepSchedule, opts: &CostOptions) -> Result<f64> {
    if schedule.per_step.is_empty() {
        return Err(Error::InvalidSchedule("schedule has no steps".into()));
    }
    let mut cache: HashMap<(&[String], u64), u64> = HashMap::new();
    let mut sum: u128 = 0;
    for step in &schedule.per_step {
        let key = (step.exempt.as_slice(), step.ratio.to_bits());
        let total = match cache.get(&key) {
            Some(&t) => t,
            None => {
                let t = step_flops(topology, step, opts)?.total();
                cache.insert(key, t);
                t
            }
        };
        sum += total as u128;
    }
    Ok(sum as f64 / schedule.per_step.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub ratio: f64,
    /// Schedule-averaged cost at `ratio`.
    pub achieved: f64,
    /// Average cost with nothing pruned.
    pub full: f64,
    /// Average cost with one token kept in every non-exempt block.
    pub floor: f64,
    pub iterations: usize,
}

impl BudgetSolution {
    /// Fraction of the full cost removed.
    pub fn saving(&self) -> f64 {
        1.0 - self.achieved / self.full
    }
}

/// Pruning ratio whose schedule-averaged cost meets `target` within
/// [`SOLVER_REL_TOLERANCE`].
///
/// The cost is a step function of the ratio (token counts are integers); when
/// no ratio lands within tolerance the cheapest ratio not above the target's
/// upper tolerance edge is returned.
pub fn solve_ratio(
    topology: &UNetTopology,
    template: &ScheduleOptions,
    target: f64,
    opts: &CostOptions,
) -> Result<BudgetSolution> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "budget target {target} must be positive"
        )));
    }
    let cost = |ratio: f64| -> Result<f64> {
        let schedule = build_schedule(template, topology, ratio)?;
        schedule_average_flops(topology, &schedule, opts)
    };
    let full = cost(0.0)?;
    let floor = cost(FLOOR_RATIO)?;
    let within = |v: f64| (v - target).abs() <= SOLVER_REL_TOLERANCE * target;
    let solution = |ratio, achieved, iterations| BudgetSolution {
        ratio,
        achieved,
        full,
        floor,
        iterations,
    };

    if within(full) {
        return Ok(solution(0.0, full, 0));
    }
    if target > full {
        return Err(Error::TargetAboveFullCost { target, full });
    }
    if target < floor && !within(floor) {
        return Err(Error::TargetBelowFloor { target, floor });
    }

    // Invariant: cost(lo) > target, cost(hi) <= target (or within tolerance).
    let (mut lo, mut hi, mut hi_cost) = (0.0f64, FLOOR_RATIO, floor);
    for iteration in 1..=MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let c = cost(mid)?;
        if within(c) {
            return Ok(solution(mid, c, iteration));
        }
        if c > target {
            lo = mid;
        } else {
            hi = mid;
            hi_cost = c;
        }
    }
    Ok(solution(hi, hi_cost, MAX_BISECTIONS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsap::StepConfig;

    #[test]
    fn uniform_schedule_average_is_single_step() {
        let topo = UNetTopology::sdxl_base();
        let opts = CostOptions::at(1024);
        let sched = build_schedule(&ScheduleOptions::without_dsap(50), &topo, 0.4).unwrap();
        let single = step_flops(&topo, &StepConfig::uniform(0, 0.4), &opts).unwrap().total();
        assert_eq!(schedule_average_flops(&topo, &sched, &opts).unwrap(), single as f64);
    }

    #[test]
    fn exemption_only_adds_work() {
        let topo = UNetTopology::sdxl_base();
        let opts = CostOptions::at(1024);
        let all = build_schedule(
            &ScheduleOptions {
                tau: 50,
                ..Default::default()
            },
            &topo,
            0.5,
        )
        .unwrap();
        let none = build_schedule(&ScheduleOptions::without_dsap(50), &topo, 0.5).unwrap();
        assert!(
            schedule_average_flops(&topo, &all, &opts).unwrap() > schedule_average_flops(&topo, &none, &opts).unwrap()
        );
    }

    #[test]
    fn solver_endpoints() {
        let topo = UNetTopology::sdxl_base();
        let opts = CostOptions::at(1024);
        let tmpl = ScheduleOptions::default();
        let full = solve_ratio(&topo, &tmpl, 1e15, &opts);
        assert!(matches!(full, Err(Error::TargetAboveFullCost { .. })));
        let probe = solve_ratio(&topo, &tmpl, 5e12, &opts).unwrap();
        let at_full = solve_ratio(&topo, &tmpl, probe.full, &opts).unwrap();
        assert_eq!(at_full.ratio, 0.0);
        assert!(matches!(
            solve_ratio(&topo, &tmpl, 1e9, &opts),
            Err(Error::TargetBelowFloor { .. })
        ));
        assert!((probe.achieved - 5e12).abs() <= 5e12 * SOLVER_REL_TOLERANCE);
    }

    #[test]
    fn ratio_falls_as_budget_rises() {
        let topo = UNetTopology::sdxl_base();
        let opts = CostOptions::at(1024);
        let tmpl = ScheduleOptions::without_dsap(50);
        let r: Vec<f64> = [3.6e12, 4.1e12, 4.6e12]
            .iter()
            .map(|&t| solve_ratio(&topo, &tmpl, t, &opts).unwrap().ratio)
            .collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }
}
