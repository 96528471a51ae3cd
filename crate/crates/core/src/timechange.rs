//! Time changes: the inverse quadratic-variation clock, the normalizing time
//! transformation, time-invariant payoff evaluation and the metric on
//! stopped paths.

use crate::embedding::payoff::{PathStatistics, Payoff, PayoffError};
use crate::paths::{dyadic_pitch, interpolate, PathError, QVPath, SampledPath};

/// `τ_t = inf{s : ⟨ω⟩_s > t}` on the linearly interpolated clock; the
/// horizon end when the clock never exceeds `t`.
pub fn tau(qp: &QVPath, t: f64) -> f64 {
    let (times, qv) = (qp.base().times(), qp.qv());
    let j = qv.partition_point(|&q| q <= t);
    if j == qv.len() {
        return qp.base().horizon();
    }
    if j == 0 {
        return times[0];
    }
    let i = j - 1;
    let lambda = (t - qv[i]) / (qv[j] - qv[i]);
    times[i] + lambda * (times[j] - times[i])
}

/// `τ_{t-} = inf{s : ⟨ω⟩_s ≥ t}`.
pub fn tau_left(qp: &QVPath, t: f64) -> f64 {
    let (times, qv) = (qp.base().times(), qp.qv());
    let j = qv.partition_point(|&q| q < t);
    if j == qv.len() {
        return qp.base().horizon();
    }
    if j == 0 {
        return times[0];
    }
    let i = j - 1;
    let lambda = (t - qv[i]) / (qv[j] - qv[i]);
    times[i] + lambda * (times[j] - times[i])
}

/// `ω(τ_t)`, computed from the segment fraction of the clock so that the
/// result does not depend on how the segment is parametrized in time.
pub fn value_at_clock(qp: &QVPath, t: f64) -> f64 {
    let (values, qv) = (qp.base().values(), qp.qv());
    let j = qv.partition_point(|&q| q <= t);
    if j == qv.len() {
        return *values.last().expect("nonempty");
    }
    if j == 0 {
        return values[0];
    }
    let i = j - 1;
    let lambda = (t - qv[i]) / (qv[j] - qv[i]);
    values[i] + lambda * (values[j] - values[i])
}

/// Default pitch of the uniform clock grid: `2^{-2n}` for a path whose qv was
/// computed at level `n`.
pub fn default_clock_pitch(qp: &QVPath) -> f64 {
    let d = dyadic_pitch(qp.level());
    d * d
}

/// Normalizing time transformation on the default clock grid.
pub fn ntt(qp: &QVPath) -> SampledPath {
    ntt_with(qp, default_clock_pitch(qp), &[])
}

/// `t ↦ ω(τ_t)` sampled on `pitch·N ∩ [0, ⟨ω⟩_end]`, at every clock value of
/// the input samples and at the `extra` clock levels. Constant after
/// `⟨ω⟩_end`.
pub fn ntt_with(qp: &QVPath, pitch: f64, extra: &[f64]) -> SampledPath {
    assert!(pitch > 0.0, "clock pitch must be positive");
    let end = qp.total_qv();
    let mut grid: Vec<f64> = Vec::new();
    let steps = (end / pitch).floor() as usize;
    grid.extend((0..=steps).map(|j| j as f64 * pitch));
    grid.extend(qp.qv().iter().copied());
    grid.extend(extra.iter().copied().filter(|&t| t >= 0.0 && t <= end));
    grid.push(end);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut values: Vec<f64> = grid.iter().map(|&t| value_at_clock(qp, t)).collect();
    // ω(τ_{0-}) = ω(0); the path is flat wherever its clock is.
    values[0] = 0.0;
    SampledPath::new(grid, values).expect("clock grid is increasing and starts at 0")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeChange {
    knots: Vec<f64>,
    values: Vec<f64>,
    strictly_increasing: bool,
    unbounded: bool,
}

impl TimeChange {
    /// A nondecreasing map given by its values `g(knot)` with `g(0) = 0`;
    /// `unbounded` declares that it continues to infinity past the last knot.
    pub fn new(knots: Vec<f64>, values: Vec<f64>, unbounded: bool) -> Result<Self, PathError> {
        if knots.len() != values.len() {
            return Err(PathError::LengthMismatch {
                times: knots.len(),
                values: values.len(),
            });
        }
        if knots.is_empty() {
            return Err(PathError::Empty);
        }
        if knots[0] != 0.0 || values[0] != 0.0 {
            return Err(PathError::BadStart {
                time: knots[0],
                value: values[0],
            });
        }
        if let Some(index) = (1..knots.len()).find(|&i| knots[i] <= knots[i - 1]) {
            return Err(PathError::NotIncreasing { index });
        }
        if let Some(index) = (1..values.len()).find(|&i| values[i] < values[i - 1]) {
            return Err(PathError::NotIncreasing { index });
        }
        let strictly_increasing = values.windows(2).all(|w| w[1] > w[0]);
        Ok(Self {
            knots,
            values,
            strictly_increasing,
            unbounded,
        })
    }

    pub fn identity(knots: Vec<f64>) -> Self {
        let values = knots.clone();
        Self::new(knots, values, true).expect("identity is a time change")
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.strictly_increasing
    }

    pub fn is_unbounded(&self) -> bool {
        self.unbounded
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn eval(&self, s: f64) -> f64 {
        interpolate(&self.knots, &self.values, s)
    }
}

/// `ω ∘ g` sampled at the knots of `g`.
pub fn apply_time_change(path: &SampledPath, g: &TimeChange) -> SampledPath {
    let values = g.values.iter().map(|&u| path.value_at(u)).collect();
    let mut values: Vec<f64> = values;
    values[0] = 0.0;
    SampledPath::new(g.knots.clone(), values).expect("knots are increasing from 0")
}

/// Time-change a path together with its clock: `⟨ω∘g⟩ = ⟨ω⟩∘g`.
pub fn apply_time_change_qv(qp: &QVPath, g: &TimeChange) -> QVPath {
    let base = apply_time_change(qp.base(), g);
    let qv = g.values.iter().map(|&u| qp.qv_at(u)).collect();
    QVPath::from_parts(base, qv, qp.level()).expect("same length")
}

/// Statistics of the time-normalized path stopped at the clock readings
/// `⟨ω⟩_1, …, ⟨ω⟩_n`.
pub fn path_statistics(qp: &QVPath, n: usize) -> Result<PathStatistics, PayoffError> {
    let horizon = qp.base().horizon();
    if (n as f64) > horizon {
        return Err(PayoffError::Domain {
            index: n,
            available: horizon.floor() as usize,
        });
    }
    let s: Vec<f64> = (1..=n).map(|j| qp.qv_at(j as f64)).collect();
    let normalized = ntt_with(qp, default_clock_pitch(qp), &s);
    let x = s
        .iter()
        .map(|&level| normalized.value_at(level))
        .collect();
    let end = s.last().copied().unwrap_or(0.0);
    let max = normalized
        .times()
        .iter()
        .zip(normalized.values())
        .filter(|(t, _)| **t <= end)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    Ok(PathStatistics { max, x, s })
}

/// `G(ω) = γ(ntt(ω) on [0, ⟨ω⟩_n], ⟨ω⟩_1, …, ⟨ω⟩_n)`.
pub fn evaluate_payoff(payoff: &Payoff, qp: &QVPath, n: usize) -> Result<f64, PayoffError> {
    if payoff.n_stops() > n {
        return Err(PayoffError::Domain {
            index: payoff.n_stops(),
            available: n,
        });
    }
    let stats = path_statistics(qp, payoff.n_stops())?;
    Ok(payoff.eval(&stats))
}

/// A path `f` observed up to `s_n` with stops `s_1 ≤ … ≤ s_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppedPath {
    f: SampledPath,
    stops: Vec<f64>,
}

impl StoppedPath {
    pub fn new(f: SampledPath, stops: Vec<f64>) -> Result<Self, PathError> {
        if stops.is_empty() {
            return Err(PathError::Empty);
        }
        if let Some(index) = (0..stops.len()).find(|&i| {
            stops[i] < 0.0 || (i > 0 && stops[i] < stops[i - 1]) || stops[i] > f.horizon()
        }) {
            return Err(PathError::NotIncreasing { index });
        }
        Ok(Self { f, stops })
    }

    pub fn path(&self) -> &SampledPath {
        &self.f
    }

    pub fn stops(&self) -> &[f64] {
        &self.stops
    }

    pub fn last_stop(&self) -> f64 {
        *self.stops.last().expect("nonempty")
    }

    fn stopped_value(&self, u: f64) -> f64 {
        self.f.value_at(u.min(self.last_stop()))
    }
}

/// `max(|s_i − t_i|, sup_u |f(u∧s_n) − g(u∧t_n)|)`; both sides must carry the
/// same number of stops.
pub fn stopped_path_distance(a: &StoppedPath, b: &StoppedPath) -> f64 {
    assert_eq!(
        a.stops.len(),
        b.stops.len(),
        "stopped paths carry different numbers of stops"
    );
    let time_part = a
        .stops
        .iter()
        .zip(&b.stops)
        .map(|(s, t)| (s - t).abs())
        .fold(0.0, f64::max);
    // Both stopped paths are piecewise linear, so the sup sits on a knot.
    let (sa, sb) = (a.last_stop(), b.last_stop());
    let knots = a
        .f
        .times()
        .iter()
        .copied()
        .filter(|&u| u <= sa)
        .chain(b.f.times().iter().copied().filter(|&u| u <= sb))
        .chain([sa, sb]);
    let space_part = knots
        .map(|u| (a.stopped_value(u) - b.stopped_value(u)).abs())
        .fold(0.0, f64::max);
    time_part.max(space_part)
}
