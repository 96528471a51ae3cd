//! Simple trading strategies on sampled paths, their capital processes,
//! compensators of convex functions of the path and admissibility floors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::PhiSpec;
use crate::paths::{lebesgue_hits, dyadic_pitch, QVPath, SampledPath};

/// Default bound on the absolute position of a simple strategy.
pub const DEFAULT_POSITION_CAP: f64 = 1e6;
/// Relative slack used when comparing capital against a floor.
pub const FLOOR_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("leg {leg}: position {position} exceeds the cap {cap}")]
    PositionCap { leg: usize, position: f64, cap: f64 },
    #[error("leg {leg}: entry time {time} does not come after the previous entry {previous}")]
    NotIncreasing { leg: usize, time: f64, previous: f64 },
    #[error("first leg must be entered at time 0, not {0}")]
    LateStart(f64),
    #[error("invalid strategy: {0}")]
    Invalid(String),
}

/// When a leg is entered, relative to the entry of the previous leg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryRule {
    /// First time the path sits at `level`.
    FirstHit { level: f64 },
    /// A fixed calendar time.
    AtTime { time: f64 },
    /// First time the quadratic variation reaches `level`.
    AtQv { level: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub entry: EntryRule,
    pub position: f64,
}

/// Piecewise-constant holdings: `positions[k]` is held on
/// `[times[k], times[k+1])`, the last one until the horizon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PositionPlan {
    times: Vec<f64>,
    positions: Vec<f64>,
}

impl PositionPlan {
    pub fn new(times: Vec<f64>, positions: Vec<f64>) -> Result<Self, StrategyError> {
        if times.len() != positions.len() {
            return Err(StrategyError::Invalid("times and positions differ in length".into()));
        }
        for k in 1..times.len() {
            if times[k] <= times[k - 1] {
                return Err(StrategyError::NotIncreasing {
                    leg: k,
                    time: times[k],
                    previous: times[k - 1],
                });
            }
        }
        Ok(Self { times, positions })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn position_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.positions[k - 1]
        }
    }

    /// `(H·B)_t = Σ_k F_k (ω(τ_{k+1}∧t) − ω(τ_k∧t))`.
    pub fn capital(&self, path: &SampledPath, t: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.times.len() {
            let start = self.times[k];
            if start > t {
                break;
            }
            let end = self.times.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t);
            total += self.positions[k] * (path.value_at(end) - path.value_at(start));
        }
        total
    }

    pub fn capital_on_samples(&self, path: &SampledPath) -> Vec<f64> {
        path.times().iter().map(|&t| self.capital(path, t)).collect()
    }

    /// Stop trading from `t` on.
    pub fn truncated(&self, t: f64) -> PositionPlan {
        let keep = self.times.partition_point(|&s| s < t);
        let mut times = self.times[..keep].to_vec();
        let mut positions = self.positions[..keep].to_vec();
        if keep > 0 {
            times.push(t);
            positions.push(0.0);
        }
        PositionPlan { times, positions }
    }

    /// Holdings of both plans added together.
    pub fn add(&self, other: &PositionPlan) -> PositionPlan {
        let mut times: Vec<f64> = self.times.iter().chain(&other.times).copied().collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let positions = times
            .iter()
            .map(|&t| self.position_at(t) + other.position_at(t))
            .collect();
        PositionPlan { times, positions }
    }
}

/// Anything that produces a position plan on a path with known quadratic
/// variation.
pub trait Strategy: Sync {
    fn plan(&self, qp: &QVPath) -> Result<PositionPlan, StrategyError>;
}

/// Finitely many legs with entries given by the closed rule vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleStrategy {
    pub legs: Vec<Leg>,
    #[serde(default = "default_cap")]
    pub position_cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_POSITION_CAP
}

impl SimpleStrategy {
    pub fn new(legs: Vec<Leg>, position_cap: f64) -> Result<Self, StrategyError> {
        let s = Self { legs, position_cap };
        s.validate()?;
        Ok(s)
    }

    pub fn zero() -> Self {
        Self {
            legs: Vec::new(),
            position_cap: DEFAULT_POSITION_CAP,
        }
    }

    pub fn buy_and_hold(position: f64) -> Self {
        Self {
            legs: vec![Leg {
                entry: EntryRule::AtTime { time: 0.0 },
                position,
            }],
            position_cap: DEFAULT_POSITION_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        for (leg, l) in self.legs.iter().enumerate() {
            if !l.position.is_finite() || l.position.abs() > self.position_cap {
                return Err(StrategyError::PositionCap {
                    leg,
                    position: l.position,
                    cap: self.position_cap,
                });
            }
        }
        Ok(())
    }

    /// Parse either `{"legs": [...], "position_cap": c}` or a bare list of legs.
    pub fn from_json_str(text: &str) -> Result<Self, StrategyError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum File {
            Full(SimpleStrategy),
            Legs(Vec<Leg>),
        }
        let s = match serde_json::from_str::<File>(text)
            .map_err(|e| StrategyError::Invalid(e.to_string()))?
        {
            File::Full(s) => s,
            File::Legs(legs) => SimpleStrategy {
                legs,
                position_cap: DEFAULT_POSITION_CAP,
            },
        };
        s.validate()?;
        Ok(s)
    }
}

fn first_hit_after(path: &SampledPath, level: f64, after: f64) -> Option<f64> {
    let (ts, vs) = (path.times(), path.values());
    if path.value_at(after) == level {
        return Some(after);
    }
    let start = path.segment(after);
    for i in start..ts.len().saturating_sub(1) {
        let (t0, v0) = if ts[i] < after {
            (after, path.value_at(after))
        } else {
            (ts[i], vs[i])
        };
        let (t1, v1) = (ts[i + 1], vs[i + 1]);
        if t1 < after {
            continue;
        }
        if v0 == level {
            return Some(t0);
        }
        if (v0 - level) * (v1 - level) <= 0.0 {
            let lambda = (level - v0) / (v1 - v0);
            return Some((t0 + lambda * (t1 - t0)).min(t1));
        }
    }
    None
}

fn first_qv_after(qp: &QVPath, level: f64, after: f64) -> Option<f64> {
    if qp.qv_at(after) >= level {
        return Some(after);
    }
    let (ts, qv) = (qp.base().times(), qp.qv());
    let j = qv.partition_point(|&q| q < level);
    if j == qv.len() {
        return None;
    }
    let i = j - 1;
    let lambda = (level - qv[i]) / (qv[j] - qv[i]);
    Some((ts[i] + lambda * (ts[j] - ts[i])).min(ts[j]).max(after))
}

impl Strategy for SimpleStrategy {
    fn plan(&self, qp: &QVPath) -> Result<PositionPlan, StrategyError> {
        self.validate()?;
        let path = qp.base();
        let mut times = Vec::new();
        let mut positions = Vec::new();
        let mut previous = 0.0;
        for (leg, l) in self.legs.iter().enumerate() {
            let time = match l.entry {
                EntryRule::AtTime { time } => Some(time).filter(|&t| t <= path.horizon()),
                EntryRule::FirstHit { level } => first_hit_after(path, level, previous),
                EntryRule::AtQv { level } => first_qv_after(qp, level, previous),
            };
            let Some(time) = time else {
                break;
            };
            if leg == 0 && time != 0.0 {
                // Nothing is held before the first entry.
                times.push(0.0);
                positions.push(0.0);
            }
            if let Some(&last) = times.last() {
                if time <= last && !(leg == 0 && time == 0.0) {
                    return Err(StrategyError::NotIncreasing {
                        leg,
                        time,
                        previous: last,
                    });
                }
            }
            times.push(time);
            positions.push(l.position);
            previous = time;
        }
        PositionPlan::new(times, positions)
    }
}

/// Left-endpoint hedge along the level-`n` Lebesgue partition: hold
/// `g(ω(σ_k))` on `[σ_k, σ_{k+1})`.
pub struct LebesgueHedge<G> {
    pub integrand: G,
    pub level: u32,
}

impl<G: Fn(f64) -> f64 + Sync> Strategy for LebesgueHedge<G> {
    fn plan(&self, qp: &QVPath) -> Result<PositionPlan, StrategyError> {
        let delta = dyadic_pitch(self.level);
        let hits = lebesgue_hits(qp.base(), self.level);
        let mut times = Vec::with_capacity(hits.len());
        let mut positions = Vec::with_capacity(hits.len());
        for h in hits {
            let position = (self.integrand)(h.level as f64 * delta);
            match times.last() {
                // Rounding can merge two hits; keep the later holding.
                Some(&t) if h.time <= t => *positions.last_mut().expect("paired") = position,
                _ => {
                    times.push(h.time);
                    positions.push(position);
                }
            }
        }
        PositionPlan::new(times, positions)
    }
}

/// Floor on the capital process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissibilitySpec {
    /// `(H·B)_t ≥ −λ`.
    LambdaFloor { lambda: f64 },
    /// `(H·B)_t ≥ −c − α ζ_t` with ζ the compensator of `φ`.
    CompensatorFloor { c: f64, alpha: f64, phi: PhiSpec },
}

impl AdmissibilitySpec {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let ok = match *self {
            AdmissibilitySpec::LambdaFloor { lambda } => lambda >= 0.0,
            AdmissibilitySpec::CompensatorFloor { c, alpha, .. } => c >= 0.0 && alpha >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(StrategyError::Invalid("admissibility parameters must be nonnegative".into()))
        }
    }

    /// Floor at sample index `i` and at an interior time `t` of the
    /// following segment (`t` between samples `i` and `i + 1`).
    fn floor_at(&self, qp: &QVPath, t: f64) -> f64 {
        match *self {
            AdmissibilitySpec::LambdaFloor { lambda } => -lambda,
            AdmissibilitySpec::CompensatorFloor { c, alpha, phi } => {
                -c - alpha * compensator(qp, phi, t)
            }
        }
    }
}

/// `ζ_t = ½ ∫_0^t φ''(ω(s)) d⟨ω⟩_s` as a left-endpoint Stieltjes sum over the
/// sample grid, linear inside the last partial segment.
pub fn compensator(qp: &QVPath, phi: PhiSpec, t: f64) -> f64 {
    let (ts, vs, qv) = (qp.base().times(), qp.base().values(), qp.qv());
    let mut total = 0.0;
    for i in 1..ts.len() {
        if ts[i - 1] >= t {
            break;
        }
        let upper = if ts[i] <= t { qv[i] } else { qp.qv_at(t) };
        total += 0.5 * phi.second_derivative(vs[i - 1]) * (upper - qv[i - 1]);
    }
    total
}

pub fn compensator_on_samples(qp: &QVPath, phi: PhiSpec) -> Vec<f64> {
    let (vs, qv) = (qp.base().values(), qp.qv());
    let mut out = Vec::with_capacity(qv.len());
    let mut total = 0.0;
    out.push(0.0);
    for i in 1..qv.len() {
        total += 0.5 * phi.second_derivative(vs[i - 1]) * (qv[i] - qv[i - 1]);
        out.push(total);
    }
    out
}

/// `(H·B)_t` of a strategy on a path.
pub fn capital_process(h: &dyn Strategy, qp: &QVPath, t: f64) -> Result<f64, StrategyError> {
    Ok(h.plan(qp)?.capital(qp.base(), t))
}

/// Wrap a strategy so that it liquidates the first time its capital touches
/// the admissibility floor; crossings are located exactly inside segments.
pub struct StoppedAtFloor<S> {
    pub inner: S,
    pub floor: AdmissibilitySpec,
}

impl<S: Strategy> Strategy for StoppedAtFloor<S> {
    fn plan(&self, qp: &QVPath) -> Result<PositionPlan, StrategyError> {
        let plan = self.inner.plan(qp)?;
        let path = qp.base();
        let mut grid: Vec<f64> = path.times().iter().chain(plan.times()).copied().collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let gap = |t: f64| plan.capital(path, t) - self.floor.floor_at(qp, t);
        let mut prev_t = grid[0];
        let mut prev_gap = gap(prev_t);
        if prev_gap < 0.0 {
            return Ok(plan.truncated(prev_t));
        }
        for &t in &grid[1..] {
            let g = gap(t);
            if g < 0.0 {
                // Capital and floor are both linear between consecutive grid points.
                let lambda = prev_gap / (prev_gap - g);
                let cross = prev_t + lambda * (t - prev_t);
                return Ok(plan.truncated(cross.max(prev_t).min(t)));
            }
            prev_t = t;
            prev_gap = g;
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Admissibility {
    Pass,
    Violation { path: usize, time: f64, value: f64 },
}

impl Admissibility {
    pub fn is_pass(&self) -> bool {
        matches!(self, Admissibility::Pass)
    }
}

/// Check the floor at every sample time of every path; the reported breach
/// is the first one in path order, then time order.
pub fn check_admissible(
    h: &dyn Strategy,
    spec: &AdmissibilitySpec,
    paths: &[QVPath],
) -> Result<Admissibility, StrategyError> {
    spec.validate()?;
    let breaches: Vec<Result<Option<(f64, f64)>, StrategyError>> = paths
        .par_iter()
        .map(|qp| {
            let plan = h.plan(qp)?;
            let capital = plan.capital_on_samples(qp.base());
            let floors: Vec<f64> = match *spec {
                AdmissibilitySpec::LambdaFloor { lambda } => vec![-lambda; capital.len()],
                AdmissibilitySpec::CompensatorFloor { c, alpha, phi } => compensator_on_samples(qp, phi)
                    .into_iter()
                    .map(|z| -c - alpha * z)
                    .collect(),
            };
            Ok(qp
                .base()
                .times()
                .iter()
                .zip(capital.iter().zip(&floors))
                .find(|(_, (v, f))| **v < **f - FLOOR_TOL * (1.0 + f.abs()))
                .map(|(t, (v, _))| (*t, *v)))
        })
        .collect();
    for (path, b) in breaches.into_iter().enumerate() {
        if let Some((time, value)) = b? {
            return Ok(Admissibility::Violation { path, time, value });
        }
    }
    Ok(Admissibility::Pass)
}

/// Capital of the finest hedge in a sequence of Lebesgue hedges at
/// increasing levels, with the sup-distance between the last two elements
/// as a bound on how far the sequence still moves.
pub fn truncated_limit<G: Fn(f64) -> f64 + Sync + Copy>(
    integrand: G,
    levels: &[u32],
    qp: &QVPath,
) -> Result<(Vec<f64>, f64), StrategyError> {
    assert!(!levels.is_empty(), "need at least one level");
    let caps: Vec<Vec<f64>> = levels
        .iter()
        .map(|&level| {
            let h = LebesgueHedge { integrand, level };
            Ok(h.plan(qp)?.capital_on_samples(qp.base()))
        })
        .collect::<Result<_, StrategyError>>()?;
    let last = caps.last().expect("nonempty").clone();
    let tail = if caps.len() >= 2 {
        let prev = &caps[caps.len() - 2];
        prev.iter()
            .zip(&last)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok((last, tail))
}
