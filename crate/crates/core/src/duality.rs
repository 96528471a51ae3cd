//! Dual super-replication certificates for the lattice embedding LPs.
//!
//! A certificate prices static payoffs `ψ_j` at zero (`Σ ψ_j dμ_j = 0`),
//! starts with capital `p`, and carries a potential `U` on every state with
//! `U(root) = 0`. It is feasible when
//!
//! * `p + U(s) + ψ_n(x) ≥ γ(s)` at every state where the last stop may happen,
//! * `U(s) + ψ_{j+1}(x) ≥ U(s')` when stop `j+1` moves `s` to `s'`,
//! * `U(s) ≥ ½(U(up) + U(down))` below full depth.
//!
//! The hedge that realizes the martingale part holds
//! `(U(up) − U(down)) / 2h` units at each state (see [`crate::superrep`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::lattice::LatticeModel;
use crate::embedding::payoff::Payoff;
use crate::embedding::{
    solve_primal, solve_primal_budget, BudgetProblem, EmbeddingError, EmbeddingProblem, LpArtifacts,
    MarginalSet,
};
use crate::lp::{Direction, LinearProgram};

/// Relative tolerance for `|D − P|`.
pub const GAP_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("malformed certificate: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub p: f64,
    /// Compensator multiplier; the marginal-constrained form keeps it inside
    /// the potential and reports 0.
    pub alpha: f64,
    /// Stop index → grid index → static payoff value.
    pub psi: BTreeMap<usize, BTreeMap<i64, f64>>,
    /// Potential `U` per lattice state.
    pub potential: Vec<f64>,
    pub h: f64,
}

impl DualCertificate {
    /// The zero certificate on a lattice (ψ ≡ 0 on every reachable point).
    pub fn zero(lattice: &LatticeModel, marginals: &MarginalSet) -> Self {
        let psi = marginals
            .stages()
            .map(|(i, _)| {
                let points = crate::embedding::primal_reachable(lattice, i)
                    .into_iter()
                    .map(|k| (k, 0.0))
                    .collect();
                (i, points)
            })
            .collect();
        Self {
            p: 0.0,
            alpha: 0.0,
            psi,
            potential: vec![0.0; lattice.len()],
            h: lattice.h(),
        }
    }

    /// `ψ_stage` at grid index `k`: zero for unconstrained stops, linear
    /// interpolation between known points and flat extrapolation outside.
    pub fn psi_at(&self, stage: usize, k: i64) -> f64 {
        match self.psi.get(&stage) {
            None => 0.0,
            Some(points) => {
                if let Some(v) = points.get(&k) {
                    return *v;
                }
                self.psi_value(stage, k as f64 * self.h)
            }
        }
    }

    /// Piecewise-linear extension of `ψ_stage` to arbitrary values.
    pub fn psi_value(&self, stage: usize, x: f64) -> f64 {
        let Some(points) = self.psi.get(&stage) else {
            return 0.0;
        };
        let xs: Vec<f64> = points.keys().map(|&k| k as f64 * self.h).collect();
        let ys: Vec<f64> = points.values().copied().collect();
        if xs.is_empty() {
            return 0.0;
        }
        crate::paths::interpolate(&xs, &ys, x)
    }

    /// `p + Σ_j ∫ψ_j dμ_j`.
    pub fn value(&self, marginals: &MarginalSet) -> f64 {
        self.p + self.static_prices(marginals).values().sum::<f64>()
    }

    /// `∫ψ_j dμ_j` per constrained stop.
    pub fn static_prices(&self, marginals: &MarginalSet) -> BTreeMap<usize, f64> {
        marginals
            .stages()
            .map(|(i, mu)| (i, mu.iter().map(|(k, m)| self.psi_at(i, k) * m).sum()))
            .collect()
    }

    /// Add `c` to `ψ_stage` and compensate in `p` and in the potential of
    /// every later stage, leaving every pathwise slack unchanged.
    pub fn shift_psi(&mut self, lattice: &LatticeModel, stage: usize, c: f64) {
        if let Some(points) = self.psi.get_mut(&stage) {
            for v in points.values_mut() {
                *v += c;
            }
            self.p -= c;
            for (i, s) in lattice.states().iter().enumerate() {
                if s.key.stage >= stage {
                    self.potential[i] += c;
                }
            }
        }
    }

    pub fn to_file(&self, lattice: &LatticeModel) -> CertificateFile {
        let psi = self
            .psi
            .iter()
            .map(|(j, points)| {
                (
                    j.to_string(),
                    points.iter().map(|(&k, &v)| [k as f64 * self.h, v]).collect(),
                )
            })
            .collect();
        let martingales = (1..=lattice.n_stages())
            .map(|stage| StagePotential {
                stage,
                values: lattice
                    .states()
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.key.stage + 1 == stage)
                    .map(|(i, s)| (s.key.to_string(), self.potential[i]))
                    .collect(),
            })
            .collect();
        CertificateFile {
            p: self.p,
            alpha: self.alpha,
            h: self.h,
            psi,
            martingales,
        }
    }

    pub fn from_file(file: &CertificateFile, lattice: &LatticeModel) -> Result<Self, DualityError> {
        if (file.h - lattice.h()).abs() > 1e-15 {
            return Err(DualityError::Malformed(format!(
                "certificate step {} does not match lattice step {}",
                file.h,
                lattice.h()
            )));
        }
        let mut psi = BTreeMap::new();
        for (j, points) in &file.psi {
            let stage: usize = j
                .parse()
                .map_err(|_| DualityError::Malformed(format!("bad stop index `{j}`")))?;
            let mut map = BTreeMap::new();
            for [x, v] in points {
                let k = (x / lattice.h()).round();
                if (k * lattice.h() - x).abs() > 1e-9 {
                    return Err(DualityError::Malformed(format!("ψ point {x} is off the grid")));
                }
                map.insert(k as i64, *v);
            }
            psi.insert(stage, map);
        }
        let mut potential = vec![f64::NAN; lattice.len()];
        for sp in &file.martingales {
            for (key, v) in &sp.values {
                let parsed = key.parse().map_err(DualityError::Malformed)?;
                let i = lattice
                    .find(&parsed)
                    .ok_or_else(|| DualityError::Malformed(format!("unknown state `{key}`")))?;
                potential[i] = *v;
            }
        }
        if let Some(i) = potential.iter().position(|v| v.is_nan()) {
            return Err(DualityError::Malformed(format!(
                "no potential for state {}",
                lattice.state(i).key
            )));
        }
        Ok(Self {
            p: file.p,
            alpha: file.alpha,
            psi,
            potential,
            h: file.h,
        })
    }
}

/// JSON form of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub p: f64,
    pub alpha: f64,
    pub h: f64,
    pub psi: BTreeMap<String, Vec<[f64; 2]>>,
    pub martingales: Vec<StagePotential>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePotential {
    pub stage: usize,
    pub values: Vec<(String, f64)>,
}

/// Smallest potential satisfying the stop and supermartingale constraints
/// for the given static payoffs, by backward induction; `penalty` subtracts
/// `α·cost(s)` from the continuation value.
pub(crate) fn snell_potential(
    lattice: &LatticeModel,
    payoff: &Payoff,
    psi: &dyn Fn(usize, i64) -> f64,
    penalty: Option<(f64, &[f64])>,
) -> Vec<f64> {
    let n = lattice.len();
    let mut v = vec![0.0; n];
    for i in (0..n).rev() {
        let s = lattice.state(i);
        let k = s.key.k as i64;
        let stop = match s.advance {
            Some(a) => v[a] - psi(s.key.stage + 1, k),
            None => lattice.final_payoff(i, payoff) - psi(s.key.stage + 1, k),
        };
        v[i] = match (s.up, s.down) {
            (Some(u), Some(d)) => {
                let mut cont = 0.5 * (v[u] + v[d]);
                if let Some((alpha, costs)) = penalty {
                    cont -= alpha * costs[i];
                }
                stop.max(cont)
            }
            _ => stop,
        };
    }
    v
}

/// Read static payoffs from the LP row duals, recenter them to zero price,
/// and rebuild an exactly feasible potential.
pub fn certificate_from_lp(problem: &EmbeddingProblem, artifacts: &LpArtifacts) -> DualCertificate {
    let lattice = &problem.lattice;
    let mut psi: BTreeMap<usize, BTreeMap<i64, f64>> = BTreeMap::new();
    for (&stage, rows) in &artifacts.marginal_rows {
        let raw: BTreeMap<i64, f64> = rows
            .iter()
            .map(|(&k, &r)| (k, artifacts.solution.row_duals[r]))
            .collect();
        let mu = problem.marginals.get(stage).expect("constrained stage");
        let price: f64 = mu.iter().map(|(k, m)| raw.get(&k).copied().unwrap_or(0.0) * m).sum();
        psi.insert(stage, raw.into_iter().map(|(k, v)| (k, v - price)).collect());
    }
    from_psi(lattice, &problem.payoff, psi)
}

fn from_psi(lattice: &LatticeModel, payoff: &Payoff, psi: BTreeMap<usize, BTreeMap<i64, f64>>) -> DualCertificate {
    let lookup = |stage: usize, k: i64| {
        psi.get(&stage)
            .and_then(|p| p.get(&k))
            .copied()
            .unwrap_or(0.0)
    };
    let v = snell_potential(lattice, payoff, &lookup, None);
    let p = v[lattice.root()];
    DualCertificate {
        p,
        alpha: 0.0,
        potential: v.iter().map(|x| x - p).collect(),
        psi,
        h: lattice.h(),
    }
}

/// Solve the embedding LP and return its certificate.
pub fn solve_dual(problem: &EmbeddingProblem) -> Result<DualCertificate, DualityError> {
    let primal = solve_primal(problem)?;
    Ok(certificate_from_lp(problem, &primal.artifacts))
}

/// Among certificates of value at most `target`, find static payoffs with
/// the smallest sup norm, and rebuild the potential for them.
pub fn min_sup_norm_certificate(
    problem: &EmbeddingProblem,
    target: f64,
) -> Result<DualCertificate, DualityError> {
    let lattice = &problem.lattice;
    let n = lattice.len();
    let mut lp = LinearProgram::new();
    // Columns first: potentials, static payoffs, p, t.
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::new();
    let u_cols: Vec<usize> = (0..n).map(|_| new_col(&mut entries)).collect();
    let mut psi_cols: BTreeMap<(usize, i64), usize> = BTreeMap::new();
    for (stage, _) in problem.marginals.stages() {
        for k in crate::embedding::primal_reachable(lattice, stage) {
            psi_cols.insert((stage, k), new_col(&mut entries));
        }
    }
    let p_col = new_col(&mut entries);
    let t_col = new_col(&mut entries);

    let mut row = |lp: &mut LinearProgram, lo: f64, hi: f64, coefs: &[(usize, f64)]| {
        let r = lp.add_row(lo, hi);
        for &(c, v) in coefs {
            entries[c].push((r, v));
        }
    };
    for i in 0..n {
        let s = lattice.state(i);
        let k = s.key.k as i64;
        let stop = s.key.stage + 1;
        let mut coefs = vec![(u_cols[i], 1.0)];
        if let Some(&c) = psi_cols.get(&(stop, k)) {
            coefs.push((c, 1.0));
        }
        match s.advance {
            Some(a) => {
                coefs.push((u_cols[a], -1.0));
                row(&mut lp, 0.0, f64::INFINITY, &coefs);
            }
            None => {
                coefs.push((p_col, 1.0));
                row(&mut lp, lattice.final_payoff(i, &problem.payoff), f64::INFINITY, &coefs);
            }
        }
        if let (Some(u), Some(d)) = (s.up, s.down) {
            row(
                &mut lp,
                0.0,
                f64::INFINITY,
                &[(u_cols[i], 1.0), (u_cols[u], -0.5), (u_cols[d], -0.5)],
            );
        }
    }
    for (stage, mu) in problem.marginals.stages() {
        let coefs: Vec<(usize, f64)> = mu
            .iter()
            .filter_map(|(k, m)| psi_cols.get(&(stage, k)).map(|&c| (c, m)))
            .collect();
        row(&mut lp, 0.0, 0.0, &coefs);
    }
    let slack = 1e-9 * (1.0 + target.abs());
    row(&mut lp, f64::NEG_INFINITY, target + slack, &[(p_col, 1.0)]);
    for &c in psi_cols.values() {
        row(&mut lp, f64::NEG_INFINITY, 0.0, &[(c, 1.0), (t_col, -1.0)]);
        row(&mut lp, f64::NEG_INFINITY, 0.0, &[(c, -1.0), (t_col, -1.0)]);
    }
    for (c, e) in entries.into_iter().enumerate() {
        let (lo, cost) = if c == t_col {
            (0.0, 1.0)
        } else if c == u_cols[lattice.root()] {
            (0.0, 0.0)
        } else {
            (f64::NEG_INFINITY, 0.0)
        };
        let hi = if c == u_cols[lattice.root()] { 0.0 } else { f64::INFINITY };
        lp.add_column(cost, lo, hi, e);
    }
    let sol = lp.solve(Direction::Minimise).map_err(EmbeddingError::from)?;
    let mut psi: BTreeMap<usize, BTreeMap<i64, f64>> = BTreeMap::new();
    for (&(stage, k), &c) in &psi_cols {
        psi.entry(stage).or_default().insert(k, sol.primal[c]);
    }
    // Re-center exactly before rebuilding the potential.
    for (stage, points) in psi.iter_mut() {
        let mu = problem.marginals.get(*stage).expect("constrained");
        let price: f64 = mu.iter().map(|(k, m)| points.get(&k).copied().unwrap_or(0.0) * m).sum();
        for v in points.values_mut() {
            *v -= price;
        }
    }
    Ok(from_psi(lattice, &problem.payoff, psi))
}

fn new_col(entries: &mut Vec<Vec<(usize, f64)>>) -> usize {
    entries.push(Vec::new());
    entries.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualFeasibility {
    /// Smallest slack of the stop/dominance constraints.
    pub min_slack: f64,
    pub witness: Option<String>,
    /// Smallest `U(s) − ½(U(up) + U(down))`.
    pub min_supermartingale_slack: f64,
    pub supermartingale_witness: Option<String>,
}

impl DualFeasibility {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.min_slack >= -tol && self.min_supermartingale_slack >= -tol
    }
}

/// Evaluate every dual constraint of the certificate over the state graph.
pub fn verify_dual_feasibility(
    cert: &DualCertificate,
    lattice: &LatticeModel,
    payoff: &Payoff,
) -> DualFeasibility {
    verify_with(cert, lattice, payoff, None)
}

fn verify_with(
    cert: &DualCertificate,
    lattice: &LatticeModel,
    payoff: &Payoff,
    penalty: Option<(f64, &[f64])>,
) -> DualFeasibility {
    let u = &cert.potential;
    let mut min_slack = f64::INFINITY;
    let mut witness = None;
    let mut min_super = f64::INFINITY;
    let mut super_witness = None;
    for (i, s) in lattice.states().iter().enumerate() {
        let k = s.key.k as i64;
        let psi = cert.psi_at(s.key.stage + 1, k);
        let slack = match s.advance {
            Some(a) => u[i] + psi - u[a],
            None => cert.p + u[i] + psi - lattice.final_payoff(i, payoff),
        };
        if slack < min_slack {
            min_slack = slack;
            witness = Some(i);
        }
        if let (Some(up), Some(down)) = (s.up, s.down) {
            let mut slack = u[i] - 0.5 * (u[up] + u[down]);
            if let Some((alpha, costs)) = penalty {
                slack += alpha * costs[i];
            }
            if slack < min_super {
                min_super = slack;
                super_witness = Some(i);
            }
        }
    }
    DualFeasibility {
        min_slack,
        witness: witness.map(|i| lattice.state(i).key.to_string()),
        min_supermartingale_slack: if min_super.is_finite() { min_super } else { 0.0 },
        supermartingale_witness: super_witness.map(|i| lattice.state(i).key.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `gap = D − P`, passing when `|gap| ≤ 1e-7·(1 + |P|)`.
pub fn duality_gap(p: f64, d: f64) -> GapReport {
    let tolerance = GAP_TOL * (1.0 + p.abs());
    let gap = d - p;
    GapReport {
        primal: p,
        dual: d,
        gap,
        tolerance,
        pass: gap.abs() <= tolerance,
    }
}

/// Gap of two solves, or the first failure.
pub fn gap_from_solves<E>(p: Result<f64, E>, d: Result<f64, E>) -> Result<GapReport, E> {
    Ok(duality_gap(p?, d?))
}

/// Certificate of the budgeted two-stop problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCertificate {
    /// Potential part; feasibility is checked against `p + U`.
    pub base: DualCertificate,
    /// Multiplier of the first-stop compensator (implied by `μ_1`, kept 0).
    pub alpha1: f64,
    /// Multiplier of the budget constraint.
    pub alpha2: f64,
    pub budget: f64,
}

impl BudgetCertificate {
    /// `p + α_2·V_2` (the static payoffs are priced at zero).
    pub fn value(&self) -> f64 {
        self.base.p + self.alpha2 * self.budget
    }
}

#[derive(Debug, Clone)]
pub struct BudgetDual {
    pub certificate: BudgetCertificate,
    pub primal_value: f64,
    /// `V_2 − E[ζ_{τ_2}]` at the primal optimum.
    pub budget_slack: f64,
}

/// Solve the budget LP and assemble `(U, ψ_1, α_1, α_2)`.
pub fn solve_dual_budget(problem: &BudgetProblem) -> Result<BudgetDual, DualityError> {
    let primal = solve_primal_budget(problem)?;
    let lattice = &problem.lattice;
    let costs: Vec<f64> = (0..lattice.len()).map(|i| problem.step_cost(i)).collect();
    let used: f64 = primal
        .measure
        .cont
        .iter()
        .zip(&costs)
        .map(|(c, w)| c * w)
        .sum();
    let alpha2 = primal.artifacts.budget_dual().unwrap_or(0.0).max(0.0);
    let rows = &primal.artifacts.marginal_rows[&1];
    let raw: BTreeMap<i64, f64> = rows
        .iter()
        .map(|(&k, &r)| (k, primal.artifacts.solution.row_duals[r]))
        .collect();
    let price: f64 = problem
        .first
        .iter()
        .map(|(k, m)| raw.get(&k).copied().unwrap_or(0.0) * m)
        .sum();
    let psi1: BTreeMap<i64, f64> = raw.into_iter().map(|(k, v)| (k, v - price)).collect();
    let lookup = |stage: usize, k: i64| {
        if stage == 1 {
            psi1.get(&k).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    };
    let v = snell_potential(lattice, &problem.payoff, &lookup, Some((alpha2, &costs)));
    let p = v[lattice.root()];
    let mut psi = BTreeMap::new();
    psi.insert(1, psi1);
    let base = DualCertificate {
        p,
        alpha: alpha2,
        psi,
        potential: v.iter().map(|x| x - p).collect(),
        h: lattice.h(),
    };
    Ok(BudgetDual {
        certificate: BudgetCertificate {
            base,
            alpha1: 0.0,
            alpha2,
            budget: problem.budget,
        },
        primal_value: primal.value,
        budget_slack: problem.budget - used,
    })
}

/// Dual constraints of the budget problem, with the continuation constraint
/// relaxed by `α_2` times the one-step compensator.
pub fn verify_budget_feasibility(cert: &BudgetCertificate, problem: &BudgetProblem) -> DualFeasibility {
    let costs: Vec<f64> = (0..problem.lattice.len()).map(|i| problem.step_cost(i)).collect();
    verify_with(&cert.base, &problem.lattice, &problem.payoff, Some((cert.alpha2, &costs)))
}
