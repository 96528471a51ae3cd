//! LP over stopping measures on the lattice.
//!
//! Columns: `stop_s ≥ 0` for every state and `cont_s ≥ 0` below full depth.
//! Rows: flow conservation per state, then one row per constrained stop and
//! reachable grid point fixing the stopped law, then (budget variant) the
//! compensator budget.

use std::collections::{BTreeMap, BTreeSet};

use super::lattice::LatticeModel;
use super::payoff::Payoff;
use super::{BudgetProblem, EmbeddingError, EmbeddingProblem, StoppingMeasure};
use crate::lp::{Direction, LinearProgram, LpSolution};
use crate::measures::GridMeasure;

/// Index bookkeeping that lets the dual side read multipliers back.
#[derive(Debug, Clone)]
pub struct LpArtifacts {
    pub flow_rows: Vec<usize>,
    /// Stop index → grid index → row.
    pub marginal_rows: BTreeMap<usize, BTreeMap<i64, usize>>,
    pub budget_row: Option<usize>,
    pub solution: LpSolution,
}

impl LpArtifacts {
    pub fn marginal_dual(&self, stage: usize, k: i64) -> Option<f64> {
        self.marginal_rows
            .get(&stage)
            .and_then(|rows| rows.get(&k))
            .map(|&r| self.solution.row_duals[r])
    }

    pub fn budget_dual(&self) -> Option<f64> {
        self.budget_row.map(|r| self.solution.row_duals[r])
    }
}

#[derive(Debug, Clone)]
pub struct PrimalSolution {
    /// `E[γ]` under the polished stopping measure.
    pub value: f64,
    /// Objective reported by the solver.
    pub lp_objective: f64,
    pub measure: StoppingMeasure,
    pub artifacts: LpArtifacts,
}

/// Grid indices where stop `stage` can happen.
pub(crate) fn reachable_positions(lattice: &LatticeModel, stage: usize) -> BTreeSet<i64> {
    lattice
        .states()
        .iter()
        .filter(|s| s.key.stage + 1 == stage)
        .map(|s| s.key.k as i64)
        .collect()
}

fn assemble(
    lattice: &LatticeModel,
    constraints: &[(usize, &GridMeasure)],
    payoff: &Payoff,
    budget: Option<(f64, Vec<f64>)>,
) -> (LinearProgram, Vec<usize>, Vec<Option<usize>>, LpArtifactsShell) {
    let n = lattice.len();
    let mut lp = LinearProgram::new();
    let flow_rows: Vec<usize> = (0..n)
        .map(|i| {
            let rhs = if i == lattice.root() { 1.0 } else { 0.0 };
            lp.add_row(rhs, rhs)
        })
        .collect();
    let mut marginal_rows: BTreeMap<usize, BTreeMap<i64, usize>> = BTreeMap::new();
    for &(stage, mu) in constraints {
        let rows = reachable_positions(lattice, stage)
            .into_iter()
            .map(|k| {
                let rhs = mu.mass(k);
                (k, lp.add_row(rhs, rhs))
            })
            .collect();
        marginal_rows.insert(stage, rows);
    }
    let budget_row = budget
        .as_ref()
        .map(|(v, _)| lp.add_row(f64::NEG_INFINITY, *v));

    let mut stop_cols = Vec::with_capacity(n);
    let mut cont_cols = Vec::with_capacity(n);
    for i in 0..n {
        let s = lattice.state(i);
        let stop_number = s.key.stage + 1;
        let mut entries = vec![(flow_rows[i], 1.0)];
        if let Some(a) = s.advance {
            entries.push((flow_rows[a], -1.0));
        }
        if let Some(&row) = marginal_rows
            .get(&stop_number)
            .and_then(|rows| rows.get(&(s.key.k as i64)))
        {
            entries.push((row, 1.0));
        }
        let cost = if lattice.is_final_stage(i) {
            lattice.final_payoff(i, payoff)
        } else {
            0.0
        };
        stop_cols.push(lp.add_column(cost, 0.0, f64::INFINITY, entries));

        cont_cols.push(match (s.up, s.down) {
            (Some(u), Some(d)) => {
                let mut entries = vec![(flow_rows[i], 1.0), (flow_rows[u], -0.5), (flow_rows[d], -0.5)];
                if let (Some(r), Some((_, costs))) = (budget_row, budget.as_ref()) {
                    if costs[i] != 0.0 {
                        entries.push((r, costs[i]));
                    }
                }
                Some(lp.add_column(0.0, 0.0, f64::INFINITY, entries))
            }
            _ => None,
        });
    }
    (
        lp,
        stop_cols,
        cont_cols,
        LpArtifactsShell {
            flow_rows,
            marginal_rows,
            budget_row,
        },
    )
}

struct LpArtifactsShell {
    flow_rows: Vec<usize>,
    marginal_rows: BTreeMap<usize, BTreeMap<i64, usize>>,
    budget_row: Option<usize>,
}

fn run(
    lattice: &LatticeModel,
    constraints: &[(usize, &GridMeasure)],
    payoff: &Payoff,
    budget: Option<(f64, Vec<f64>)>,
) -> Result<PrimalSolution, EmbeddingError> {
    let (lp, _stop_cols, cont_cols, shell) = assemble(lattice, constraints, payoff, budget);
    let solution = lp.solve(Direction::Maximise)?;
    let hint: Vec<f64> = cont_cols
        .iter()
        .map(|c| c.map(|j| solution.primal[j]).unwrap_or(0.0))
        .collect();
    let measure = StoppingMeasure::from_continuation(lattice, &hint);
    let value = measure.value(lattice, payoff);
    Ok(PrimalSolution {
        value,
        lp_objective: solution.objective,
        measure,
        artifacts: LpArtifacts {
            flow_rows: shell.flow_rows,
            marginal_rows: shell.marginal_rows,
            budget_row: shell.budget_row,
            solution,
        },
    })
}

/// Maximise `E[γ]` over stopping measures embedding every constrained
/// marginal at its stop.
pub fn solve_primal(problem: &EmbeddingProblem) -> Result<PrimalSolution, EmbeddingError> {
    let constraints: Vec<(usize, &GridMeasure)> = problem.marginals.stages().collect();
    run(&problem.lattice, &constraints, &problem.payoff, None)
}

/// Maximise `E[γ(τ_1, τ_2)]` with `τ_1` embedding `μ_1` and the second stop
/// limited only by the compensator budget.
pub fn solve_primal_budget(problem: &BudgetProblem) -> Result<PrimalSolution, EmbeddingError> {
    let costs: Vec<f64> = (0..problem.lattice.len()).map(|i| problem.step_cost(i)).collect();
    run(
        &problem.lattice,
        &[(1, &problem.first)],
        &problem.payoff,
        Some((problem.budget, costs)),
    )
}
