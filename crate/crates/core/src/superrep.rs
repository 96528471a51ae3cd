//! Hedges extracted from dual certificates, pathwise super-replication
//! checks, and Monte Carlo checks against lattice martingale models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::duality::DualCertificate;
use crate::embedding::payoff::Payoff;
use crate::embedding::{LatticeModel, MarginalSet, StoppingMeasure};
use crate::strategies::{EntryRule, Leg, SimpleStrategy, DEFAULT_POSITION_CAP};

/// Slack below which a checked path counts as a violation.
pub const SUPERHEDGE_TOL: f64 = 1e-8;

const HISTOGRAM_BINS: usize = 10;

/// Lattice hedge: `delta[s]` units held over the step leaving state `s`.
///
/// The potential decomposes as `U(child) = U(s) − drift[s] ± delta[s]·h`,
/// so the hedge capital `M` satisfies `M − U = Σ drift ≥ 0` on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeHedge {
    pub delta: Vec<f64>,
    pub drift: Vec<f64>,
    h: f64,
}

pub fn certificate_to_strategy(cert: &DualCertificate, lattice: &LatticeModel) -> LatticeHedge {
    let u = &cert.potential;
    let h = lattice.h();
    let mut delta = vec![0.0; lattice.len()];
    let mut drift = vec![0.0; lattice.len()];
    for (i, s) in lattice.states().iter().enumerate() {
        if let (Some(up), Some(down)) = (s.up, s.down) {
            delta[i] = (u[up] - u[down]) / (2.0 * h);
            drift[i] = u[i] - 0.5 * (u[up] + u[down]);
        }
    }
    LatticeHedge { delta, drift, h }
}

impl LatticeHedge {
    pub fn position(&self, state: usize) -> f64 {
        self.delta[state]
    }

    /// Largest `|U(child) − U(s) + drift(s) − Δ(s)·(±h)|` over all steps.
    pub fn replication_residual(&self, cert: &DualCertificate, lattice: &LatticeModel) -> f64 {
        let u = &cert.potential;
        let mut worst: f64 = 0.0;
        for (i, s) in lattice.states().iter().enumerate() {
            if let (Some(up), Some(down)) = (s.up, s.down) {
                let base = u[i] - self.drift[i];
                worst = worst
                    .max((u[up] - base - self.delta[i] * self.h).abs())
                    .max((u[down] - base + self.delta[i] * self.h).abs());
            }
        }
        worst
    }

    /// Hedge capital after each state of a lattice path (starting at 0).
    pub fn capital_along(&self, lattice: &LatticeModel, states: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(states.len());
        let mut capital = 0.0;
        out.push(capital);
        for w in states.windows(2) {
            let s = lattice.state(w[0]);
            if s.up == Some(w[1]) {
                capital += self.delta[w[0]] * self.h;
            } else if s.down == Some(w[1]) {
                capital -= self.delta[w[0]] * self.h;
            }
            out.push(capital);
        }
        out
    }

    /// The positions taken along one lattice path, as a simple strategy that
    /// rebalances at the clock times `m·h²` of the path.
    pub fn strategy_along(&self, lattice: &LatticeModel, states: &[usize]) -> SimpleStrategy {
        let mut legs = Vec::new();
        for w in states.windows(2) {
            let s = lattice.state(w[0]);
            if s.up == Some(w[1]) || s.down == Some(w[1]) {
                legs.push(Leg {
                    entry: EntryRule::AtTime {
                        time: lattice.clock(w[0]),
                    },
                    position: self.delta[w[0]],
                });
            }
        }
        let cap = legs
            .iter()
            .map(|l| l.position.abs())
            .fold(DEFAULT_POSITION_CAP, f64::max);
        SimpleStrategy {
            legs,
            position_cap: cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckMode {
    /// Every path of the state graph, through a minimum recursion per state.
    Exhaustive,
    /// `n` seeded walks with uniformly random stop decisions.
    Sampled { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Final state (key string) of the offending path.
    pub state: String,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlackHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl SlackHistogram {
    fn build(slacks: &[f64]) -> Self {
        if slacks.is_empty() {
            return Self {
                edges: Vec::new(),
                counts: Vec::new(),
            };
        }
        let lo = slacks.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = slacks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Self {
                edges: vec![lo, hi],
                counts: vec![slacks.len() as u64],
            };
        }
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let edges = (0..=HISTOGRAM_BINS).map(|b| lo + b as f64 * width).collect();
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &s in slacks {
            let b = (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuperhedgeReport {
    pub min_slack: f64,
    pub violations: Vec<Violation>,
    pub histogram: SlackHistogram,
    /// Final states (exhaustive) or walks (sampled) examined.
    pub checked: usize,
}

impl SuperhedgeReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check `p + Σ ψ_j(x_j) + capital ≥ γ − 1e-8` on lattice paths.
///
/// The exhaustive mode carries, per state, the smallest value of
/// `Σ ψ_j(x_j) + capital` over all paths reaching it; this is enough since
/// the payoff depends on the path only through the final state.
pub fn verify_pathwise_superhedge(
    cert: &DualCertificate,
    hedge: &LatticeHedge,
    lattice: &LatticeModel,
    payoff: &Payoff,
    mode: CheckMode,
) -> SuperhedgeReport {
    let final_slack = |i: usize, carried: f64| {
        let s = lattice.state(i);
        cert.p + carried + cert.psi_at(s.key.stage + 1, s.key.k as i64) - lattice.final_payoff(i, payoff)
    };
    let mut results: Vec<(usize, f64)> = Vec::new();
    match mode {
        CheckMode::Exhaustive => {
            let n = lattice.len();
            let mut low = vec![f64::INFINITY; n];
            low[lattice.root()] = 0.0;
            for i in 0..n {
                let s = lattice.state(i);
                let l = low[i];
                if !l.is_finite() {
                    continue;
                }
                if let (Some(u), Some(d)) = (s.up, s.down) {
                    let step = hedge.delta[i] * lattice.h();
                    low[u] = low[u].min(l + step);
                    low[d] = low[d].min(l - step);
                }
                match s.advance {
                    Some(a) => {
                        let psi = cert.psi_at(s.key.stage + 1, s.key.k as i64);
                        low[a] = low[a].min(l + psi);
                    }
                    None => results.push((i, final_slack(i, l))),
                }
            }
        }
        CheckMode::Sampled { n, seed } => {
            results = (0..n)
                .into_par_iter()
                .map(|w| {
                    let mut rng = walk_rng(seed, w);
                    let mut i = lattice.root();
                    let mut carried = 0.0;
                    loop {
                        let s = lattice.state(i);
                        let can_continue = s.up.is_some();
                        if can_continue && rng.gen::<bool>() {
                            let step = hedge.delta[i] * lattice.h();
                            if rng.gen::<bool>() {
                                carried += step;
                                i = s.up.unwrap();
                            } else {
                                carried -= step;
                                i = s.down.unwrap();
                            }
                        } else if let Some(a) = s.advance {
                            carried += cert.psi_at(s.key.stage + 1, s.key.k as i64);
                            i = a;
                        } else {
                            return (i, final_slack(i, carried));
                        }
                    }
                })
                .collect();
        }
    }
    let slacks: Vec<f64> = results.iter().map(|r| r.1).collect();
    let min_slack = slacks.iter().copied().fold(f64::INFINITY, f64::min);
    let violations = results
        .iter()
        .filter(|r| r.1 < -SUPERHEDGE_TOL)
        .map(|&(i, slack)| Violation {
            state: lattice.state(i).key.to_string(),
            slack,
        })
        .collect();
    SuperhedgeReport {
        min_slack: if min_slack.is_finite() { min_slack } else { 0.0 },
        violations,
        histogram: SlackHistogram::build(&slacks),
        checked: results.len(),
    }
}

fn walk_rng(seed: u64, walk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(walk as u64);
    rng
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuperrepError {
    #[error("model law at stop {stage} differs from the marginal at {x}: {empirical} vs {target} (tolerance {tolerance})")]
    ModelMarginalMismatch {
        stage: usize,
        x: f64,
        empirical: f64,
        target: f64,
        tolerance: f64,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Martingale models on the lattice, all given as stopping measures.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Stop at each state with probability `stop / inflow`.
    Stopping(StoppingMeasure),
    /// Single stop at the first visit of either grid index.
    FirstHit { lower: i64, upper: i64 },
}

impl ModelSpec {
    pub fn to_measure(&self, lattice: &LatticeModel) -> Result<StoppingMeasure, SuperrepError> {
        match self {
            ModelSpec::Stopping(m) => {
                if m.stop.len() != lattice.len() {
                    return Err(SuperrepError::InvalidModel(format!(
                        "measure has {} states, lattice has {}",
                        m.stop.len(),
                        lattice.len()
                    )));
                }
                Ok(m.clone())
            }
            &ModelSpec::FirstHit { lower, upper } => {
                if lattice.n_stages() != 1 || lower >= upper {
                    return Err(SuperrepError::InvalidModel(
                        "first-hit models need one stop and lower < upper".into(),
                    ));
                }
                let cont: Vec<f64> = lattice
                    .states()
                    .iter()
                    .map(|s| {
                        let k = s.key.k as i64;
                        if k <= lower || k >= upper {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect();
                Ok(StoppingMeasure::from_continuation(lattice, &cont))
            }
        }
    }
}

/// Does the first-hit model of `{lower, upper}` embed the only marginal
/// exactly within the lattice depth?
pub fn first_hit_embeds(lattice: &LatticeModel, marginals: &MarginalSet, lower: i64, upper: i64) -> bool {
    let Ok(m) = (ModelSpec::FirstHit { lower, upper }).to_measure(lattice) else {
        return false;
    };
    let Some(mu) = marginals.get(1) else {
        return false;
    };
    let law = m.stopped_law(lattice, 1);
    let mut points: Vec<i64> = law.keys().copied().collect();
    points.extend(mu.iter().map(|(k, _)| k));
    points
        .iter()
        .all(|&k| (law.get(&k).copied().unwrap_or(0.0) - mu.mass(k)).abs() <= 1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub estimate: f64,
    pub std_error: f64,
    /// Half-width `1.96·SE` of the normal confidence interval.
    pub ci: f64,
    pub bound: f64,
    pub n: usize,
    /// Largest gap between empirical and target stopped laws.
    pub marginal_deviation: f64,
    pub pass: bool,
}

/// Sample the model, check its stopped laws against the marginals and
/// compare the mean payoff with the certificate value `bound`.
pub fn monte_carlo_model_check(
    bound: f64,
    model: &ModelSpec,
    lattice: &LatticeModel,
    marginals: &MarginalSet,
    payoff: &Payoff,
    n: usize,
    seed: u64,
) -> Result<McReport, SuperrepError> {
    if n == 0 {
        return Err(SuperrepError::InvalidModel("no samples requested".into()));
    }
    let measure = model.to_measure(lattice)?;
    let walks: Vec<(f64, Vec<i64>)> = (0..n)
        .into_par_iter()
        .map(|w| sample_walk(&measure, lattice, payoff, walk_rng(seed, w)))
        .collect();

    let tolerance = 4.0 / (n as f64).sqrt();
    let mut marginal_deviation: f64 = 0.0;
    for (stage, mu) in marginals.stages() {
        let mut counts: BTreeMap<i64, f64> = BTreeMap::new();
        for (_, stops) in &walks {
            *counts.entry(stops[stage - 1]).or_insert(0.0) += 1.0;
        }
        let mut points: Vec<i64> = counts.keys().copied().collect();
        points.extend(mu.iter().map(|(k, _)| k));
        points.sort_unstable();
        points.dedup();
        for k in points {
            let empirical = counts.get(&k).copied().unwrap_or(0.0) / n as f64;
            let target = mu.mass(k);
            let dev = (empirical - target).abs();
            marginal_deviation = marginal_deviation.max(dev);
            if dev > tolerance {
                return Err(SuperrepError::ModelMarginalMismatch {
                    stage,
                    x: k as f64 * lattice.h(),
                    empirical,
                    target,
                    tolerance,
                });
            }
        }
    }

    let mean = walks.iter().map(|w| w.0).sum::<f64>() / n as f64;
    let var = if n > 1 {
        walks.iter().map(|w| (w.0 - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let std_error = (var / n as f64).sqrt();
    let ci = 1.96 * std_error;
    Ok(McReport {
        estimate: mean,
        std_error,
        ci,
        bound,
        n,
        marginal_deviation,
        // The last term only absorbs summation round-off.
        pass: mean <= bound + 3.0 * ci + 1e-12 * (1.0 + bound.abs()),
    })
}

/// One walk: payoff and the grid index at every stop.
fn sample_walk(
    measure: &StoppingMeasure,
    lattice: &LatticeModel,
    payoff: &Payoff,
    mut rng: ChaCha8Rng,
) -> (f64, Vec<i64>) {
    let mut stops = Vec::with_capacity(lattice.n_stages());
    let mut i = lattice.root();
    loop {
        let s = lattice.state(i);
        let inflow = measure.inflow[i];
        let p_stop = if inflow > 0.0 {
            (measure.stop[i] / inflow).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let u: f64 = rng.gen();
        if u <= p_stop || s.up.is_none() {
            stops.push(s.key.k as i64);
            match s.advance {
                Some(a) => i = a,
                None => return (lattice.final_payoff(i, payoff), stops),
            }
        } else if rng.gen::<bool>() {
            i = s.up.unwrap();
        } else {
            i = s.down.unwrap();
        }
    }
}
