//! Optimal Skorokhod embedding on the binomial lattice: problem assembly,
//! the primal LP over stopping measures, its budgeted two-stop variant and
//! embedding diagnostics.

pub mod lattice;
pub mod payoff;
mod primal;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::lp::LpError;
use crate::measures::{check_convex_order, DiscreteMeasure, GridMeasure, MeasureError, PhiSpec};

pub use lattice::{build_lattice, LatticeError, LatticeModel, StateKey, DEFAULT_STATE_CAP};
pub use payoff::{Expr, PathStatistics, Payoff, PayoffError, PayoffKind, PayoffSpec, Variable};
pub(crate) use primal::reachable_positions as primal_reachable;
pub use primal::{solve_primal, solve_primal_budget, LpArtifacts, PrimalSolution};

/// Why a problem has no feasible stopping measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfeasibilityWitness {
    /// `Var(μ) > T·h²`: no stopping time bounded by the depth has that variance.
    VarianceBound {
        stage: usize,
        variance: f64,
        capacity: f64,
    },
    /// Consecutive constrained marginals are not in convex order.
    ConvexOrder {
        from: usize,
        to: usize,
        strike: f64,
        excess: f64,
    },
    /// An atom lies beyond the reach of the walk.
    OutOfReach { stage: usize, value: f64, reach: f64 },
    /// The compensator budget is smaller than what embedding the first
    /// marginal already costs.
    Budget { budget: f64, required: f64 },
    /// Reported by the LP solver without a structural reason.
    Solver,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Payoff(#[from] PayoffError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("infeasible: {0:?}")]
    Infeasible(InfeasibilityWitness),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("LP solver failed: {0}")]
    Solver(String),
}

impl From<LpError> for EmbeddingError {
    fn from(e: LpError) -> Self {
        match e {
            LpError::Infeasible => EmbeddingError::Infeasible(InfeasibilityWitness::Solver),
            other => EmbeddingError::Solver(other.to_string()),
        }
    }
}

/// Marginal constraints `μ_i`, `i ∈ I`, on the grid of the lattice. The
/// largest index is the number of stops.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    grid: BTreeMap<usize, GridMeasure>,
    n: usize,
}

impl MarginalSet {
    /// Validate centering, grid support and convex order of consecutive
    /// constraints. Measures must already sit on `h·Z` (see
    /// [`crate::measures::project_to_grid`]).
    pub fn new(measures: &BTreeMap<usize, DiscreteMeasure>, h: f64) -> Result<Self, EmbeddingError> {
        let n = *measures
            .keys()
            .next_back()
            .ok_or_else(|| EmbeddingError::Invalid("no marginal constraints".into()))?;
        if measures.contains_key(&0) {
            return Err(EmbeddingError::Invalid("stops are numbered from 1".into()));
        }
        let mut grid = BTreeMap::new();
        for (&i, mu) in measures {
            let mean = mu.mean();
            if mean.abs() > crate::measures::VALIDATION_TOL {
                return Err(MeasureError::NotCentered { mean }.into());
            }
            grid.insert(i, GridMeasure::new(mu, h)?);
        }
        let keys: Vec<usize> = measures.keys().copied().collect();
        for w in keys.windows(2) {
            let order = check_convex_order(&measures[&w[0]], &measures[&w[1]])?;
            if !order.holds {
                return Err(EmbeddingError::Infeasible(InfeasibilityWitness::ConvexOrder {
                    from: w[0],
                    to: w[1],
                    strike: order.witness.unwrap_or(f64::NAN),
                    excess: order.excess,
                }));
            }
        }
        Ok(Self { grid, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, stage: usize) -> Option<&GridMeasure> {
        self.grid.get(&stage)
    }

    pub fn is_constrained(&self, stage: usize) -> bool {
        self.grid.contains_key(&stage)
    }

    pub fn stages(&self) -> impl Iterator<Item = (usize, &GridMeasure)> {
        self.grid.iter().map(|(i, g)| (*i, g))
    }

    /// Smallest constrained index `≥ stage`.
    pub fn next_constrained(&self, stage: usize) -> usize {
        *self
            .grid
            .range(stage..)
            .next()
            .map(|(i, _)| i)
            .expect("the last stop is constrained")
    }

    pub fn terminal(&self) -> &GridMeasure {
        &self.grid[&self.n]
    }

    /// Check the measures against the reach and qv capacity of a lattice.
    pub fn check_lattice(&self, lattice: &LatticeModel) -> Result<(), EmbeddingError> {
        let capacity = lattice.depth() as f64 * lattice.h() * lattice.h();
        for (i, g) in self.stages() {
            let variance = g.variance();
            if variance > capacity * (1.0 + 1e-12) {
                return Err(EmbeddingError::Infeasible(InfeasibilityWitness::VarianceBound {
                    stage: i,
                    variance,
                    capacity,
                }));
            }
            if g.support_radius() as usize > lattice.depth() {
                return Err(EmbeddingError::Infeasible(InfeasibilityWitness::OutOfReach {
                    stage: i,
                    value: g.support_radius() as f64 * lattice.h(),
                    reach: lattice.depth() as f64 * lattice.h(),
                }));
            }
        }
        Ok(())
    }
}

/// Default depth `ceil(4·Var(μ_n)/h²)`, at least one step.
pub fn default_depth(terminal: &DiscreteMeasure, h: f64) -> usize {
    ((4.0 * terminal.variance() / (h * h)) - 1e-9).ceil().max(1.0) as usize
}

/// Per-state stop/continue masses of a randomized multi-stopping time.
///
/// `stop[s]` is the mass stopping at `s` (advancing to the next stage, or
/// ending when no stops remain) and `cont[s]` the mass taking another step.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingMeasure {
    pub inflow: Vec<f64>,
    pub stop: Vec<f64>,
    pub cont: Vec<f64>,
}

impl StoppingMeasure {
    /// Rebuild exact flows from per-state continuation fractions, pushing the
    /// unit root mass forward through the state graph.
    pub fn from_continuation(lattice: &LatticeModel, cont_hint: &[f64]) -> Self {
        let n = lattice.len();
        let mut inflow = vec![0.0; n];
        let mut stop = vec![0.0; n];
        let mut cont = vec![0.0; n];
        inflow[lattice.root()] = 1.0;
        for i in 0..n {
            let s = lattice.state(i);
            let f = inflow[i];
            let c = if s.up.is_some() {
                cont_hint[i].clamp(0.0, f)
            } else {
                0.0
            };
            cont[i] = c;
            stop[i] = f - c;
            if let (Some(u), Some(d)) = (s.up, s.down) {
                inflow[u] += 0.5 * c;
                inflow[d] += 0.5 * c;
            }
            if let Some(a) = s.advance {
                inflow[a] += stop[i];
            }
        }
        Self { inflow, stop, cont }
    }

    /// Convex combination `w·self + (1−w)·other` (feasible when both are).
    pub fn mix(&self, other: &StoppingMeasure, w: f64) -> StoppingMeasure {
        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect()
        };
        StoppingMeasure {
            inflow: lerp(&self.inflow, &other.inflow),
            stop: lerp(&self.stop, &other.stop),
            cont: lerp(&self.cont, &other.cont),
        }
    }

    /// `E[γ]` under the measure.
    pub fn value(&self, lattice: &LatticeModel, payoff: &Payoff) -> f64 {
        (0..lattice.len())
            .filter(|&i| lattice.is_final_stage(i) && self.stop[i] != 0.0)
            .map(|i| self.stop[i] * lattice.final_payoff(i, payoff))
            .sum()
    }

    /// Law of the walk at stop `stage` (1-based), by grid index.
    pub fn stopped_law(&self, lattice: &LatticeModel, stage: usize) -> BTreeMap<i64, f64> {
        let mut law = BTreeMap::new();
        for (i, s) in lattice.states().iter().enumerate() {
            if s.key.stage + 1 == stage && self.stop[i] != 0.0 {
                *law.entry(s.key.k as i64).or_insert(0.0) += self.stop[i];
            }
        }
        law
    }

    /// `E[⟨B⟩_{τ_stage}] = Σ stop·m·h²` over stage `stage − 1` states.
    pub fn expected_clock(&self, lattice: &LatticeModel, stage: usize) -> f64 {
        (0..lattice.len())
            .filter(|&i| lattice.state(i).key.stage + 1 == stage)
            .map(|i| self.stop[i] * lattice.clock(i))
            .sum()
    }

    /// `E[ζ_{τ_stage}]` for the exact one-step compensator of `φ`: every step
    /// taken before the stop contributes `½(φ(x+h)+φ(x−h)) − φ(x)`.
    pub fn expected_compensator(&self, lattice: &LatticeModel, stage: usize, phi: PhiSpec) -> f64 {
        (0..lattice.len())
            .filter(|&i| lattice.state(i).key.stage < stage && self.cont[i] != 0.0)
            .map(|i| self.cont[i] * phi.lattice_increment(lattice.position(i), lattice.h()))
            .sum()
    }

    /// Largest absolute flow-conservation residual.
    pub fn flow_residual(&self, lattice: &LatticeModel) -> f64 {
        let n = lattice.len();
        let mut inflow = vec![0.0; n];
        inflow[lattice.root()] = 1.0;
        for i in 0..n {
            let s = lattice.state(i);
            if let (Some(u), Some(d)) = (s.up, s.down) {
                inflow[u] += 0.5 * self.cont[i];
                inflow[d] += 0.5 * self.cont[i];
            }
            if let Some(a) = s.advance {
                inflow[a] += self.stop[i];
            }
        }
        (0..n)
            .map(|i| {
                let depth_leak = if lattice.state(i).up.is_none() { self.cont[i].abs() } else { 0.0 };
                (inflow[i] - self.stop[i] - self.cont[i]).abs() + depth_leak
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub constrained: bool,
    /// `max_x |law(x) − μ(x)|` (constrained stages only).
    pub sup_atom_deviation: Option<f64>,
    pub expected_clock: f64,
    pub expected_compensator: f64,
    /// `∫φ dμ_{i+}` for the next constrained stage `i+ ≥ i`; absent past the
    /// last constraint (budgeted stops).
    pub compensator_budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingReport {
    pub stages: Vec<StageDiagnostics>,
    pub flow_residual: f64,
}

pub fn embedding_report(
    sm: &StoppingMeasure,
    lattice: &LatticeModel,
    marginals: &MarginalSet,
    phi: PhiSpec,
) -> EmbeddingReport {
    let stages = (1..=lattice.n_stages())
        .map(|stage| {
            let sup_atom_deviation = marginals.get(stage).map(|mu| {
                let law = sm.stopped_law(lattice, stage);
                let keys: std::collections::BTreeSet<i64> =
                    law.keys().copied().chain(mu.iter().map(|(k, _)| k)).collect();
                keys.into_iter()
                    .map(|k| (law.get(&k).copied().unwrap_or(0.0) - mu.mass(k)).abs())
                    .fold(0.0, f64::max)
            });
            let budget_mu = marginals.grid.range(stage..).next().map(|(_, mu)| mu);
            StageDiagnostics {
                stage,
                constrained: marginals.is_constrained(stage),
                sup_atom_deviation,
                expected_clock: sm.expected_clock(lattice, stage),
                expected_compensator: sm.expected_compensator(lattice, stage, phi),
                compensator_budget: budget_mu.map(|mu| mu.integrate(|x| phi.value(x))),
            }
        })
        .collect();
    EmbeddingReport {
        stages,
        flow_residual: sm.flow_residual(lattice),
    }
}

/// Everything needed to set up the lattice LP.
#[derive(Debug, Clone)]
pub struct EmbeddingProblem {
    pub lattice: LatticeModel,
    pub marginals: MarginalSet,
    pub payoff: Payoff,
}

impl EmbeddingProblem {
    /// Compile the payoff, build the lattice and check feasibility
    /// preconditions. Measures must be grid-supported.
    pub fn new(
        h: f64,
        depth: usize,
        measures: &BTreeMap<usize, DiscreteMeasure>,
        payoff: &PayoffSpec,
        state_cap: usize,
    ) -> Result<Self, EmbeddingError> {
        let marginals = MarginalSet::new(measures, h)?;
        let payoff = payoff.compile(marginals.n())?;
        payoff.upper_bound(h, depth)?;
        let lattice = build_lattice(h, depth, &payoff, marginals.n(), state_cap)?;
        marginals.check_lattice(&lattice)?;
        Ok(Self {
            lattice,
            marginals,
            payoff,
        })
    }

    /// Same lattice and marginals with the payoff negated.
    pub fn negated(&self) -> Self {
        Self {
            lattice: self.lattice.clone(),
            marginals: self.marginals.clone(),
            payoff: self.payoff.negated(),
        }
    }
}

/// Two-stop problem with the first stop constrained by `μ_1` and the second
/// only budgeted through `E[ζ^φ_{τ_2}] ≤ V_2`.
#[derive(Debug, Clone)]
pub struct BudgetProblem {
    pub lattice: LatticeModel,
    pub first: GridMeasure,
    pub budget: f64,
    pub phi: PhiSpec,
    pub payoff: Payoff,
}

impl BudgetProblem {
    pub fn new(
        h: f64,
        depth: usize,
        mu1: &DiscreteMeasure,
        budget: f64,
        phi: PhiSpec,
        payoff: &PayoffSpec,
        state_cap: usize,
    ) -> Result<Self, EmbeddingError> {
        let mut one = BTreeMap::new();
        one.insert(1, mu1.clone());
        let marginals = MarginalSet::new(&one, h)?;
        let payoff = payoff.compile(2)?;
        payoff.upper_bound(h, depth)?;
        let lattice = build_lattice(h, depth, &payoff, 2, state_cap)?;
        marginals.check_lattice(&lattice)?;
        let first = marginals.terminal().clone();
        let required = first.integrate(|x| phi.value(x));
        if budget < required - 1e-12 * (1.0 + required) {
            return Err(EmbeddingError::Infeasible(InfeasibilityWitness::Budget {
                budget,
                required,
            }));
        }
        Ok(Self {
            lattice,
            first,
            budget,
            phi,
            payoff,
        })
    }

    /// Compensator increment of one step taken from state `i`.
    pub fn step_cost(&self, i: usize) -> f64 {
        self.phi
            .lattice_increment(self.lattice.position(i), self.lattice.h())
    }
}
