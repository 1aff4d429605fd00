//! Boundary burst: the same trace replayed through a fixed window and a
//! rolling window limiter, scored by the most requests either admits inside
//! any window-length span.

use limitd_core::limiter::{fixed_window_allow, rolling_window_allow, FixedWindowState, RollingWindowState};
use limitd_core::{ParamsError, RuleParams};
use thiserror::Error;

use crate::report::{ExperimentReport, Provenance, ResultRow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BurstPattern {
    /// `per_side` requests at `window - offset` and again at `window + offset`,
    /// either side of the first window boundary.
    Straddle { per_side: u64, offset: f64 },
    /// One request every `interval` seconds over `[0, duration)`.
    Uniform { interval: f64, duration: f64 },
    /// `count` simultaneous requests at time `at`.
    Inside { count: u64, at: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BurstError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("straddle offset must be in (0, window/2), got {0}")]
    Offset(f64),
    #[error("uniform interval and duration must be positive")]
    Uniform,
    #[error("burst time must be non-negative, got {0}")]
    At(f64),
}

impl BurstPattern {
    /// Arrival times, sorted.
    pub fn trace(&self, window: f64) -> Result<Vec<f64>, BurstError> {
        match *self {
            BurstPattern::Straddle { per_side, offset } => {
                if !(offset > 0.0 && offset < window / 2.0) {
                    return Err(BurstError::Offset(offset));
                }
                let side = |t: f64| std::iter::repeat_n(t, per_side as usize);
                Ok(side(window - offset).chain(side(window + offset)).collect())
            }
            BurstPattern::Uniform { interval, duration } => {
                if !(interval > 0.0 && duration > 0.0) {
                    return Err(BurstError::Uniform);
                }
                let n = (duration / interval).ceil() as u64;
                Ok((0..n).map(|k| k as f64 * interval).collect())
            }
            BurstPattern::Inside { count, at } => {
                if !(at >= 0.0) {
                    return Err(BurstError::At(at));
                }
                Ok(vec![at; count as usize])
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            BurstPattern::Straddle { per_side, offset } => format!("straddle per_side={per_side} offset={offset}"),
            BurstPattern::Uniform { interval, duration } => format!("uniform interval={interval} duration={duration}"),
            BurstPattern::Inside { count, at } => format!("inside count={count} at={at}"),
        }
    }
}

/// Admitted arrival times of `times` under the fixed window limiter.
pub fn replay_fixed(params: &RuleParams, times: &[f64]) -> Result<Vec<f64>, ParamsError> {
    let mut state = FixedWindowState::default();
    let mut admitted = Vec::new();
    for &t in times {
        let (decision, next) = fixed_window_allow(state, params, t)?;
        state = next;
        if decision.allowed {
            admitted.push(t);
        }
    }
    Ok(admitted)
}

/// Admitted arrival times of `times` under the rolling window limiter.
pub fn replay_rolling(params: &RuleParams, times: &[f64]) -> Result<Vec<f64>, ParamsError> {
    let mut state = RollingWindowState::default();
    let mut admitted = Vec::new();
    for &t in times {
        let (decision, next) = rolling_window_allow(state, params, t)?;
        state = next;
        if decision.allowed {
            admitted.push(t);
        }
    }
    Ok(admitted)
}

/// Most admitted times inside any span `(end - window, end]`, by brute force.
///
/// Every span of length `window` holding admitted times fits in one ending
/// at its latest admitted time, so checking those ends covers all spans.
pub fn max_in_window(admitted: &[f64], window: f64) -> u64 {
    admitted
        .iter()
        .map(|&end| admitted.iter().filter(|&&t| t > end - window && t <= end).count() as u64)
        .max()
        .unwrap_or(0)
}

/// Shortest span holding `count` admitted times, if there are that many.
pub fn shortest_span(admitted: &[f64], count: u64) -> Option<f64> {
    let count = count as usize;
    if count == 0 || admitted.len() < count {
        return None;
    }
    admitted
        .windows(count)
        .map(|w| w[count - 1] - w[0])
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstOutcome {
    pub fixed_admitted: Vec<f64>,
    pub rolling_admitted: Vec<f64>,
    pub fixed_max_in_window: u64,
    pub rolling_max_in_window: u64,
    /// Shortest span in which the fixed window admitted `max + 1` requests.
    pub fixed_overshoot_span: Option<f64>,
}

pub fn burst_outcome(window: f64, max: u64, times: &[f64]) -> Result<BurstOutcome, ParamsError> {
    let fixed = replay_fixed(&RuleParams::fixed_window(window, max), times)?;
    let rolling = replay_rolling(&RuleParams::rolling_window(window, max), times)?;
    Ok(BurstOutcome {
        fixed_max_in_window: max_in_window(&fixed, window),
        rolling_max_in_window: max_in_window(&rolling, window),
        fixed_overshoot_span: shortest_span(&fixed, max + 1),
        fixed_admitted: fixed,
        rolling_admitted: rolling,
    })
}

pub fn run_boundary_burst(window: f64, max: u64, pattern: BurstPattern) -> Result<ExperimentReport, BurstError> {
    RuleParams::rolling_window(window, max).validate()?;
    let times = pattern.trace(window)?;
    let outcome = burst_outcome(window, max, &times)?;

    let mut report = ExperimentReport::new("boundary_burst")
        .parameter("window", window)
        .parameter("max", max)
        .parameter("pattern", pattern.describe())
        .parameter("requests", times.len());
    let row = |label: &str, admitted: &[f64], in_window: u64| {
        ResultRow::new(label, Provenance::Measured)
            .metric("admitted", admitted.len())
            .metric("max_in_window", in_window)
    };
    report.rows.push(
        row("fixed_window", &outcome.fixed_admitted, outcome.fixed_max_in_window).metric(
            "overshoot_span",
            outcome.fixed_overshoot_span.map_or("none".to_string(), |s| format!("{s:.6}")),
        ),
    );
    report
        .rows
        .push(row("rolling_window", &outcome.rolling_admitted, outcome.rolling_max_in_window));

    report.require(
        outcome.rolling_max_in_window <= max,
        format!("rolling window admits at most {max} in any window span"),
    );
    if let BurstPattern::Straddle { per_side, .. } = pattern {
        // Each side lands in its own fixed window, which starts empty.
        let expected = 2 * per_side.min(max);
        report.require(
            outcome.fixed_max_in_window == expected,
            format!("fixed window admits {expected} across the boundary"),
        );
        if expected > max {
            let straddle = times.last().zip(times.first()).map_or(0.0, |(last, first)| last - first);
            report.require(
                outcome.fixed_overshoot_span.is_some_and(|s| s <= straddle),
                format!("fixed window overshoots within {straddle:.6} s"),
            );
        }
    }
    Ok(report)
}
