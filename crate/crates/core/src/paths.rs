//! Pathwise calculus on finitely sampled, linearly interpolated paths:
//! dyadic Lebesgue partitions, discrete quadratic variation along them,
//! membership in the space of paths with quadratic variation, and the
//! left-endpoint (Föllmer) integral.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("a path needs at least one sample")]
    Empty,
    #[error("times and values have different lengths ({times} vs {values})")]
    LengthMismatch { times: usize, values: usize },
    #[error("path must start at time 0 with value 0 (got ({time}, {value}))")]
    BadStart { time: f64, value: f64 },
    #[error("sample times must be strictly increasing (index {index})")]
    NotIncreasing { index: usize },
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("could not parse path: {0}")]
    Parse(String),
}

/// A continuous path given by samples and linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl SampledPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, PathError> {
        if times.len() != values.len() {
            return Err(PathError::LengthMismatch {
                times: times.len(),
                values: values.len(),
            });
        }
        if times.is_empty() {
            return Err(PathError::Empty);
        }
        for (index, (t, v)) in times.iter().zip(&values).enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(PathError::NonFinite { index });
            }
        }
        if times[0] != 0.0 || values[0] != 0.0 {
            return Err(PathError::BadStart {
                time: times[0],
                value: values[0],
            });
        }
        if let Some(index) = (1..times.len()).find(|&i| times[i] <= times[i - 1]) {
            return Err(PathError::NotIncreasing { index });
        }
        Ok(Self { times, values })
    }

    /// Walk path with increments `steps` taken every `dt` time units.
    pub fn from_increments(dt: f64, steps: &[f64]) -> Self {
        let mut times = Vec::with_capacity(steps.len() + 1);
        let mut values = Vec::with_capacity(steps.len() + 1);
        times.push(0.0);
        values.push(0.0);
        let mut v = 0.0;
        for (i, s) in steps.iter().enumerate() {
            v += s;
            times.push((i + 1) as f64 * dt);
            values.push(v);
        }
        Self { times, values }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    /// Index `i` of the segment `[t_i, t_{i+1}]` containing `t`, clamped to
    /// the sample range.
    pub fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        if n < 2 || t <= self.times[0] {
            return 0;
        }
        match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => i.min(n - 2),
            Err(i) => (i - 1).min(n - 2),
        }
    }

    /// Linear interpolation, constant beyond the horizon.
    pub fn value_at(&self, t: f64) -> f64 {
        interpolate(&self.times, &self.values, t)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, PathError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| PathError::Parse(e.to_string()))?
            .clone();
        if headers.len() != 2 || &headers[0] != "time" || &headers[1] != "value" {
            return Err(PathError::Parse(
                "expected header `time,value`".to_string(),
            ));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| PathError::Parse(e.to_string()))?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| PathError::Parse(format!("`{s}`: {e}")))
            };
            times.push(parse(&record[0])?);
            values.push(parse(&record[1])?);
        }
        Self::new(times, values)
    }

    pub fn load(path: &Path) -> Result<Self, PathError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PathError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("time,value\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            out.push_str(&format!("{t:?},{v:?}\n"));
        }
        out
    }
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`, constant outside.
pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = match xs.binary_search_by(|s| s.total_cmp(&x)) {
        Ok(i) => return ys[i],
        Err(i) => i - 1,
    };
    let lambda = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + lambda * (ys[i + 1] - ys[i])
}

/// Grid pitch `2^{-n}`.
pub fn dyadic_pitch(n: u32) -> f64 {
    (-(n as f64)).exp2()
}

/// One stopping time of the Lebesgue partition together with the grid
/// index of the level reached there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridHit {
    pub time: f64,
    pub level: i64,
}

/// Stopping times `σ_k` at which the path reaches a new point of
/// `2^{-n}·Z`, including `σ_0 = 0`. Hit times are solved exactly on each
/// linear segment.
pub fn lebesgue_hits(path: &SampledPath, n: u32) -> Vec<GridHit> {
    let delta = dyadic_pitch(n);
    let mut hits = vec![GridHit {
        time: 0.0,
        level: 0,
    }];
    let mut level: i64 = 0;
    let (ts, vs) = (path.times(), path.values());
    for i in 0..ts.len().saturating_sub(1) {
        let (t0, t1, v0, v1) = (ts[i], ts[i + 1], vs[i], vs[i + 1]);
        if v1 == v0 {
            continue;
        }
        let rising = v1 > v0;
        loop {
            let next = if rising { level + 1 } else { level - 1 };
            let target = next as f64 * delta;
            let reached = if rising { v1 >= target } else { v1 <= target };
            if !reached {
                break;
            }
            let lambda = (target - v0) / (v1 - v0);
            let time = if lambda >= 1.0 {
                t1
            } else {
                t0 + lambda * (t1 - t0)
            };
            // Rounding in the segment fraction must not reorder hits.
            let prev = hits.last().expect("σ_0").time;
            hits.push(GridHit {
                time: time.max(prev),
                level: next,
            });
            level = next;
        }
    }
    hits
}

/// Times of the Lebesgue partition at level `n`.
pub fn lebesgue_partition(path: &SampledPath, n: u32) -> Vec<f64> {
    lebesgue_hits(path, n).into_iter().map(|h| h.time).collect()
}

/// `V^n_t`: squared grid increments completed by `t` plus the squared
/// distance from the last reached grid point.
pub fn discrete_qv(path: &SampledPath, n: u32, t: f64) -> f64 {
    let hits = lebesgue_hits(path, n);
    qv_from_hits(path, &hits, dyadic_pitch(n), t)
}

fn qv_from_hits(path: &SampledPath, hits: &[GridHit], delta: f64, t: f64) -> f64 {
    // Number of σ_k ≤ t, σ_0 included.
    let reached = hits.partition_point(|h| h.time <= t);
    let last = hits[reached - 1];
    let partial = path.value_at(t) - last.level as f64 * delta;
    (reached - 1) as f64 * delta * delta + partial * partial
}

/// `V^n` evaluated at every sample time of the path in one sweep.
pub fn discrete_qv_on_samples(path: &SampledPath, n: u32) -> Vec<f64> {
    let hits = lebesgue_hits(path, n);
    let delta = dyadic_pitch(n);
    let mut out = Vec::with_capacity(path.len());
    let mut reached = 0usize;
    for (t, v) in path.times().iter().zip(path.values()) {
        while reached < hits.len() && hits[reached].time <= *t {
            reached += 1;
        }
        let partial = v - hits[reached - 1].level as f64 * delta;
        out.push((reached - 1) as f64 * delta * delta + partial * partial);
    }
    out
}

/// A path together with its quadratic variation on the same time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QVPath {
    base: SampledPath,
    qv: Vec<f64>,
    level: u32,
}

impl QVPath {
    /// Pair a path with a given quadratic variation profile (no checks beyond
    /// matching lengths; see [`check_qv_membership`]).
    pub fn from_parts(base: SampledPath, qv: Vec<f64>, level: u32) -> Result<Self, PathError> {
        if qv.len() != base.len() {
            return Err(PathError::LengthMismatch {
                times: base.len(),
                values: qv.len(),
            });
        }
        Ok(Self { base, qv, level })
    }

    /// Quadratic variation of a walk whose samples sit on `2^{-n}·Z` and move
    /// by at most one grid step between samples: the level-`n` discrete qv.
    pub fn from_level(base: SampledPath, n: u32) -> Self {
        let qv = monotone_envelope(discrete_qv_on_samples(&base, n));
        Self { base, qv, level: n }
    }

    pub fn base(&self) -> &SampledPath {
        &self.base
    }

    pub fn qv(&self) -> &[f64] {
        &self.qv
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn qv_at(&self, t: f64) -> f64 {
        interpolate(self.base.times(), &self.qv, t)
    }

    pub fn total_qv(&self) -> f64 {
        *self.qv.last().expect("nonempty")
    }
}

/// Running maximum; the finite-level `V^n` dips inside grid cells when the
/// path turns back, the limit does not.
fn monotone_envelope(mut v: Vec<f64>) -> Vec<f64> {
    let mut acc = f64::NEG_INFINITY;
    for x in &mut v {
        acc = acc.max(*x);
        *x = acc;
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDeviation {
    pub level: u32,
    pub sup_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QvLimit {
    Converged {
        path: QVPath,
        profile: Vec<LevelDeviation>,
    },
    NotConverged {
        profile: Vec<LevelDeviation>,
    },
}

impl QvLimit {
    pub fn is_converged(&self) -> bool {
        matches!(self, QvLimit::Converged { .. })
    }

    pub fn profile(&self) -> &[LevelDeviation] {
        match self {
            QvLimit::Converged { profile, .. } | QvLimit::NotConverged { profile } => profile,
        }
    }

    pub fn path(&self) -> Option<&QVPath> {
        match self {
            QvLimit::Converged { path, .. } => Some(path),
            QvLimit::NotConverged { .. } => None,
        }
    }
}

/// Compare `V^n` against `V^{n_max}` in sup norm over the sample times for
/// every level in `[n_min, n_max]`; convergence is judged on the last three.
pub fn qv_limit(path: &SampledPath, n_min: u32, n_max: u32, tol: f64) -> QvLimit {
    assert!(n_min < n_max, "qv_limit needs n_min < n_max");
    let finest = discrete_qv_on_samples(path, n_max);
    let profile: Vec<LevelDeviation> = (n_min..=n_max)
        .map(|level| {
            let coarse = discrete_qv_on_samples(path, level);
            let sup_deviation = coarse
                .iter()
                .zip(&finest)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            LevelDeviation {
                level,
                sup_deviation,
            }
        })
        .collect();
    let first_checked = n_max.saturating_sub(2).max(n_min);
    let converged = profile
        .iter()
        .filter(|d| d.level >= first_checked)
        .all(|d| d.sup_deviation <= tol);
    if converged {
        QvLimit::Converged {
            path: QVPath {
                base: path.clone(),
                qv: monotone_envelope(finest),
                level: n_max,
            },
            profile,
        }
    } else {
        QvLimit::NotConverged { profile }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Membership {
    Member,
    Violation(String),
}

impl Membership {
    pub fn is_member(&self) -> bool {
        matches!(self, Membership::Member)
    }
}

/// Check the two structural clauses of the quadratic-variation space at the
/// resolution `2·2^{-n}`: `qv` is a nondecreasing clock started at 0, and it
/// is flat exactly where the path is.
pub fn check_qv_membership(qp: &QVPath) -> Membership {
    let qv = qp.qv();
    let values = qp.base().values();
    if qv[0] != 0.0 {
        return Membership::Violation(format!("qv(0) = {} is not 0", qv[0]));
    }
    if let Some(i) = (1..qv.len()).find(|&i| qv[i] < qv[i - 1]) {
        return Membership::Violation(format!(
            "qv decreases at t = {}",
            qp.base().times()[i]
        ));
    }
    for i in 1..qv.len() {
        if values[i] == values[i - 1] && qv[i] != qv[i - 1] {
            return Membership::Violation(format!(
                "constancy mismatch: qv moves on [{}, {}] where the path is constant",
                qp.base().times()[i - 1],
                qp.base().times()[i]
            ));
        }
    }
    let resolution = 2.0 * dyadic_pitch(qp.level());
    let mut start = 0;
    while start + 1 < qv.len() {
        if qv[start + 1] != qv[start] {
            start += 1;
            continue;
        }
        let mut end = start + 1;
        while end + 1 < qv.len() && qv[end + 1] == qv[start] {
            end += 1;
        }
        let run = &values[start..=end];
        let hi = run.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = run.iter().copied().fold(f64::INFINITY, f64::min);
        if hi - lo >= resolution {
            return Membership::Violation(format!(
                "constancy mismatch: qv constant on [{}, {}] where the path moves by {}",
                qp.base().times()[start],
                qp.base().times()[end],
                hi - lo
            ));
        }
        start = end;
    }
    Membership::Member
}

/// Left-endpoint integral `Σ g(ω(σ_k))·(ω(σ_{k+1}∧t) − ω(σ_k∧t))` along the
/// level-`n` Lebesgue partition.
pub fn follmer_integral(g: impl Fn(f64) -> f64, path: &SampledPath, n: u32, t: f64) -> f64 {
    let hits = lebesgue_hits(path, n);
    let delta = dyadic_pitch(n);
    let reached = hits.partition_point(|h| h.time <= t);
    let mut total = 0.0;
    for k in 0..reached {
        let a = hits[k].level as f64 * delta;
        let b = if k + 1 < reached {
            hits[k + 1].level as f64 * delta
        } else {
            path.value_at(t)
        };
        total += g(a) * (b - a);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear() -> SampledPath {
        SampledPath::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap()
    }

    fn zigzag() -> SampledPath {
        SampledPath::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap()
    }

    fn constant() -> SampledPath {
        SampledPath::new(vec![0.0, 0.5, 1.0], vec![0.0, 0.0, 0.0]).unwrap()
    }

    fn walk(seed: u64, n: u32, steps: usize) -> SampledPath {
        let h = dyadic_pitch(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let incs: Vec<f64> = (0..steps)
            .map(|_| if rng.gen::<bool>() { h } else { -h })
            .collect();
        SampledPath::from_increments(h * h, &incs)
    }

    #[test]
    fn rejects_malformed_paths() {
        assert!(SampledPath::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(SampledPath::new(vec![0.5], vec![0.0]).is_err());
        assert!(SampledPath::new(vec![0.0], vec![1.0]).is_err());
        assert!(SampledPath::new(vec![], vec![]).is_err());
    }

    #[test]
    fn partition_examples() {
        assert_eq!(lebesgue_partition(&constant(), 3), vec![0.0]);
        assert_eq!(lebesgue_partition(&linear(), 0), vec![0.0, 1.0]);
        assert_eq!(
            lebesgue_partition(&zigzag(), 1),
            vec![0.0, 0.5, 1.0, 1.5, 2.0]
        );
    }

    #[test]
    fn qv_examples() {
        assert_eq!(discrete_qv(&constant(), 4, 1.0), 0.0);
        assert_eq!(discrete_qv(&zigzag(), 1, 2.0), 1.0);
        assert_eq!(discrete_qv(&linear(), 0, 1.0), 1.0);
        // Partial increment inside a cell.
        assert_eq!(discrete_qv(&linear(), 0, 0.5), 0.25);
    }

    #[test]
    fn qv_on_samples_matches_pointwise() {
        let p = walk(3, 3, 200);
        let sweep = discrete_qv_on_samples(&p, 2);
        for (t, v) in p.times().iter().zip(&sweep) {
            assert_eq!(*v, discrete_qv(&p, 2, *t));
        }
    }

    #[test]
    fn random_walk_qv_converges_to_clock() {
        let n = 8;
        let h = dyadic_pitch(n);
        let p = walk(11, n, 1 << 16);
        match qv_limit(&p, 2, n, 0.1) {
            QvLimit::Converged { path, .. } => {
                let dev = path
                    .base()
                    .times()
                    .iter()
                    .zip(path.qv())
                    .map(|(t, q)| (q - t).abs())
                    .fold(0.0, f64::max);
                assert!(dev <= 2.0 * h, "deviation {dev}");
                assert!(check_qv_membership(&path).is_member());
            }
            other => panic!("not converged: {:?}", other.profile()),
        }
    }

    #[test]
    fn constant_path_converges_to_zero() {
        let r = qv_limit(&constant(), 0, 6, 1e-12);
        let qp = r.path().expect("converged");
        assert!(qp.qv().iter().all(|&q| q == 0.0));
        assert!(check_qv_membership(qp).is_member());
    }

    #[test]
    fn smooth_path_has_vanishing_discrete_qv() {
        let p = linear();
        for n in 0..10 {
            let v = discrete_qv(&p, n, 1.0);
            assert!((v - dyadic_pitch(n)).abs() < 1e-15);
        }
        let r = qv_limit(&p, 4, 10, 0.1);
        assert!(r.is_converged());
        assert!((r.path().unwrap().total_qv() - dyadic_pitch(10)).abs() < 1e-15);
    }

    #[test]
    fn membership_flags_flat_clock_on_moving_path() {
        let p = SampledPath::new(
            (0..=100).map(|i| i as f64 / 100.0).collect(),
            (0..=100).map(|i| i as f64 / 100.0).collect(),
        )
        .unwrap();
        let qp = QVPath::from_parts(p, vec![0.0; 101], 8).unwrap();
        match check_qv_membership(&qp) {
            Membership::Violation(reason) => assert!(reason.contains("constancy mismatch")),
            Membership::Member => panic!("expected violation"),
        }
    }

    #[test]
    fn membership_flags_moving_clock_on_flat_path() {
        let qp = QVPath::from_parts(constant(), vec![0.0, 0.1, 0.2], 4).unwrap();
        assert!(!check_qv_membership(&qp).is_member());
    }

    #[test]
    fn flat_piece_inside_walk() {
        let n = 6;
        let h = dyadic_pitch(n);
        let dt = h * h;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Steps on [0, 0.4], a flat stretch on [0.4, 0.6], steps on [0.6, 1].
        let steps_per_unit = (1.0 / dt) as usize;
        let mut incs = Vec::new();
        for i in 0..steps_per_unit {
            let t = (i + 1) as f64 * dt;
            if t > 0.4 && t <= 0.6 {
                incs.push(0.0);
            } else {
                incs.push(if rng.gen::<bool>() { h } else { -h });
            }
        }
        let p = SampledPath::from_increments(dt, &incs);
        let r = qv_limit(&p, 2, n, 0.2);
        let qp = r.path().expect("converged");
        assert!(check_qv_membership(qp).is_member());
        let i0 = (0.4 / dt).floor() as usize;
        let i1 = (0.6 / dt).floor() as usize;
        assert!(qp.qv()[i0..=i1].iter().all(|&q| q == qp.qv()[i0]));
        assert!(qp.qv()[i0] > qp.qv()[i0 - 1]);
        assert!(qp.qv()[i1 + 1] > qp.qv()[i1]);
    }

    #[test]
    fn follmer_examples() {
        let p = zigzag();
        assert_eq!(follmer_integral(|_| 0.0, &p, 1, 2.0), 0.0);
        for t in [0.3, 1.0, 1.7] {
            assert!((follmer_integral(|_| 3.0, &p, 1, t) - 3.0 * p.value_at(t)).abs() < 1e-15);
            let lhs = follmer_integral(|x| 2.0 * x, &p, 1, t) + discrete_qv(&p, 1, t);
            assert!((lhs - p.value_at(t).powi(2)).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = zigzag();
        assert_eq!(SampledPath::from_csv_str(&p.to_csv_string()).unwrap(), p);
    }

    fn arb_path() -> impl Strategy<Value = SampledPath> {
        prop::collection::vec((0.01f64..0.5, -1.0f64..1.0), 1..60).prop_map(|segs| {
            let mut times = vec![0.0];
            let mut values = vec![0.0];
            for (dt, dv) in segs {
                times.push(times.last().unwrap() + dt);
                values.push(values.last().unwrap() + dv);
            }
            SampledPath::new(times, values).unwrap()
        })
    }

    proptest! {
        #[test]
        fn telescoping_identity(p in arb_path(), n in 0u32..6, frac in 0.0f64..1.0) {
            let t = frac * p.horizon();
            let lhs = follmer_integral(|x| 2.0 * x, &p, n, t) + discrete_qv(&p, n, t);
            let rhs = p.value_at(t).powi(2);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }

        #[test]
        fn partition_structure(p in arb_path(), n in 0u32..6) {
            let hits = lebesgue_hits(&p, n);
            prop_assert_eq!(hits[0].time, 0.0);
            for w in hits.windows(2) {
                prop_assert!(w[1].time >= w[0].time);
                prop_assert_eq!((w[1].level - w[0].level).abs(), 1);
            }
            // Hits are a.s. strictly increasing for segments that cross levels once.
            let delta = dyadic_pitch(n);
            for h in &hits[1..] {
                prop_assert!((p.value_at(h.time) - h.level as f64 * delta).abs() <= 1e-9);
            }
        }

        #[test]
        fn qv_starts_at_zero(p in arb_path(), n in 0u32..6) {
            prop_assert_eq!(discrete_qv(&p, n, 0.0), 0.0);
        }

        #[test]
        fn aligned_walk_qv_counts_steps(seed in any::<u64>(), n in 0u32..6, len in 1usize..200) {
            let p = walk(seed, n, len);
            let h = dyadic_pitch(n);
            let sweep = discrete_qv_on_samples(&p, n);
            let mut last = 0.0;
            for (i, q) in sweep.iter().enumerate() {
                prop_assert_eq!(*q, i as f64 * h * h);
                prop_assert!(*q >= last);
                last = *q;
            }
        }
    }
}
