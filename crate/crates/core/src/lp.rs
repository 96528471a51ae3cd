//! Thin column-wise LP description solved with HiGHS.

use highs::{ColProblem, HighsModelStatus, Sense};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximise,
    Minimise,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("LP solver failed: {0}")]
    Solver(String),
}

#[derive(Debug, Clone)]
struct Column {
    cost: f64,
    lower: f64,
    upper: f64,
    entries: Vec<(usize, f64)>,
}

/// `opt c·x` subject to `lo ≤ A x ≤ hi` and column bounds.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    rows: Vec<(f64, f64)>,
    cols: Vec<Column>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub objective: f64,
    pub primal: Vec<f64>,
    /// Row multipliers in the sign convention of the dual where the primal's
    /// objective is optimised by the dual's objective with `A^T y ≥ c` for a
    /// maximisation over nonnegative columns.
    pub row_duals: Vec<f64>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, lower: f64, upper: f64) -> usize {
        self.rows.push((lower, upper));
        self.rows.len() - 1
    }

    pub fn add_column(&mut self, cost: f64, lower: f64, upper: f64, entries: Vec<(usize, f64)>) -> usize {
        self.cols.push(Column {
            cost,
            lower,
            upper,
            entries,
        });
        self.cols.len() - 1
    }

    /// Append a coefficient to an existing column.
    pub fn push_entry(&mut self, col: usize, row: usize, coef: f64) {
        self.cols[col].entries.push((row, coef));
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn solve(&self, direction: Direction) -> Result<LpSolution, LpError> {
        if self.cols.is_empty() {
            return Ok(LpSolution {
                objective: 0.0,
                primal: Vec::new(),
                row_duals: vec![0.0; self.rows.len()],
            });
        }
        let mut pb = ColProblem::default();
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|&(lo, hi)| pb.add_row(lo..=hi))
            .collect();
        for c in &self.cols {
            let factors: Vec<_> = c.entries.iter().map(|&(r, v)| (rows[r], v)).collect();
            pb.add_column(c.cost, c.lower..=c.upper, &factors);
        }
        let sense = match direction {
            Direction::Maximise => Sense::Maximise,
            Direction::Minimise => Sense::Minimise,
        };
        let mut model = pb.optimise(sense);
        model.make_quiet();
        model.set_option("solver", "simplex");
        model.set_option("primal_feasibility_tolerance", 1e-10);
        model.set_option("dual_feasibility_tolerance", 1e-10);
        model.set_option("threads", 1);
        let solved = model.solve();
        match solved.status() {
            HighsModelStatus::Optimal => {}
            HighsModelStatus::Infeasible => return Err(LpError::Infeasible),
            HighsModelStatus::Unbounded => return Err(LpError::Unbounded),
            HighsModelStatus::UnboundedOrInfeasible => return Err(LpError::Infeasible),
            other => return Err(LpError::Solver(format!("{other:?}"))),
        }
        let solution = solved.get_solution();
        Ok(LpSolution {
            objective: solved.objective_value(),
            primal: solution.columns().to_vec(),
            row_duals: solution.dual_rows().to_vec(),
        })
    }
}
