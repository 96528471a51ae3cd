//! Independent reference for the embedding LP: a dense two-phase simplex and
//! a problem builder that enumerates whole path histories instead of
//! lattice states. Payoffs are evaluated from the history directly.

#![allow(dead_code)]

use std::collections::BTreeMap;

const EPS: f64 = 1e-11;

/// Maximise `c·x` subject to `A x = b`, `x ≥ 0`. Returns `None` when the
/// system is infeasible. Rows with `b < 0` are flipped first.
pub fn maximise(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<(f64, Vec<f64>)> {
    let m = a.len();
    let n = c.len();
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (i, row) in a.iter().enumerate() {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let mut r = vec![0.0; width];
        for j in 0..n {
            r[j] = sign * row[j];
        }
        r[n + i] = 1.0;
        r[width - 1] = sign * b[i];
        t.push(r);
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Phase 1: maximise minus the sum of artificials.
    let mut cost = vec![0.0; width];
    for j in n..n + m {
        cost[j] = -1.0;
    }
    run(&mut t, &mut basis, &cost, n + m);
    let infeas: f64 = basis
        .iter()
        .zip(&t)
        .filter(|(&j, _)| j >= n)
        .map(|(_, r)| r[width - 1])
        .sum();
    if infeas > 1e-8 {
        return None;
    }

    // Drive artificials out of the basis, dropping redundant rows.
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= n {
            match (0..n).find(|&j| t[i][j].abs() > 1e-9) {
                Some(j) => pivot(&mut t, &mut basis, i, j),
                None => {
                    t.remove(i);
                    basis.remove(i);
                    continue;
                }
            }
        }
        i += 1;
    }

    let mut cost = vec![0.0; width];
    cost[..n].copy_from_slice(c);
    run(&mut t, &mut basis, &cost, n);
    let mut x = vec![0.0; n];
    for (r, &j) in t.iter().zip(&basis) {
        x[j] = r[width - 1];
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Some((value, x))
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize) {
    let p = t[row][col];
    for v in t[row].iter_mut() {
        *v /= p;
    }
    let pivot_row = t[row].clone();
    for (i, r) in t.iter_mut().enumerate() {
        if i != row {
            let f = r[col];
            if f != 0.0 {
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    basis[row] = col;
}

/// Primal simplex over the first `active` columns. Dantzig pricing, with
/// Bland's rule after a run of degenerate pivots.
fn run(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], active: usize) {
    let width = cost.len();
    let mut stalled = 0usize;
    loop {
        // Reduced costs c_j − c_B B⁻¹ A_j.
        let mut reduced = cost[..active].to_vec();
        for (r, &bj) in t.iter().zip(basis.iter()) {
            let cb = cost[bj];
            if cb != 0.0 {
                for j in 0..active {
                    reduced[j] -= cb * r[j];
                }
            }
        }
        let bland = stalled > 50;
        let entering = if bland {
            (0..active).find(|&j| reduced[j] > EPS)
        } else {
            (0..active)
                .filter(|&j| reduced[j] > EPS)
                .max_by(|&x, &y| reduced[x].partial_cmp(&reduced[y]).unwrap())
        };
        let Some(col) = entering else { return };
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in t.iter().enumerate() {
            if r[col] > 1e-9 {
                let ratio = r[width - 1] / r[col];
                let better = match best {
                    None => true,
                    Some((bi, br)) => ratio < br - 1e-12 || (ratio <= br + 1e-12 && basis[i] < basis[bi]),
                };
                if better {
                    best = Some((i, ratio));
                }
            }
        }
        let Some((row, ratio)) = best else {
            panic!("unbounded reference LP");
        };
        stalled = if ratio.abs() < 1e-12 { stalled + 1 } else { 0 };
        pivot(t, basis, row, col);
    }
}

/// History of one walker: grid positions visited and the step counts at
/// each stop so far.
#[derive(Debug, Clone)]
pub struct History {
    pub positions: Vec<i64>,
    pub stops: Vec<usize>,
}

impl History {
    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn here(&self) -> i64 {
        *self.positions.last().unwrap()
    }
}

/// Stopping problem over full histories of the `±h` walk run for at most
/// `depth` steps with `n` stops. `marginals[i]` maps grid index to mass.
pub struct PathTreeProblem<'a> {
    pub h: f64,
    pub depth: usize,
    pub n: usize,
    pub marginals: BTreeMap<usize, BTreeMap<i64, f64>>,
    pub payoff: &'a dyn Fn(&History, f64) -> f64,
}

impl PathTreeProblem<'_> {
    /// Optimal value of the LP, or `None` if no embedding exists.
    pub fn solve(&self) -> Option<f64> {
        let mut nodes: Vec<History> = Vec::new();
        let mut stack = vec![History {
            positions: vec![0],
            stops: Vec::new(),
        }];
        while let Some(node) = stack.pop() {
            if node.steps() < self.depth {
                for d in [1, -1] {
                    let mut child = node.clone();
                    child.positions.push(node.here() + d);
                    stack.push(child);
                }
            }
            if node.stops.len() + 1 < self.n {
                let mut next = node.clone();
                next.stops.push(node.steps());
                stack.push(next);
            }
            nodes.push(node);
        }
        let index: BTreeMap<(Vec<i64>, Vec<usize>), usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, v)| ((v.positions.clone(), v.stops.clone()), i))
            .collect();

        // Columns: stop_v for every node, then cont_v below full depth.
        let mut cols: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let radius = self.depth as i64;
        let marginal_row = |stage: usize, k: i64, base: usize, stages: &[usize]| {
            let pos = stages.iter().position(|&s| s == stage)?;
            Some(base + pos * (2 * radius as usize + 1) + (k + radius) as usize)
        };
        let stages: Vec<usize> = self.marginals.keys().copied().collect();
        let m_rows = nodes.len() + stages.len() * (2 * radius as usize + 1);

        for v in &nodes {
            let me = index[&(v.positions.clone(), v.stops.clone())];
            let stage = v.stops.len() + 1;
            let mut entries = vec![(me, 1.0)];
            let mut gain = 0.0;
            if stage < self.n {
                let mut next = v.stops.clone();
                next.push(v.steps());
                entries.push((index[&(v.positions.clone(), next)], -1.0));
            } else {
                let mut done = v.clone();
                done.stops.push(v.steps());
                gain = (self.payoff)(&done, self.h);
            }
            if let Some(r) = marginal_row(stage, v.here(), nodes.len(), &stages) {
                entries.push((r, 1.0));
            }
            cols.push((entries, gain));
        }
        for v in &nodes {
            if v.steps() == self.depth {
                continue;
            }
            let me = index[&(v.positions.clone(), v.stops.clone())];
            let mut entries = vec![(me, 1.0)];
            for d in [1, -1] {
                let mut p = v.positions.clone();
                p.push(v.here() + d);
                entries.push((index[&(p, v.stops.clone())], -0.5));
            }
            cols.push((entries, 0.0));
        }

        let mut a = vec![vec![0.0; cols.len()]; m_rows];
        let mut b = vec![0.0; m_rows];
        b[index[&(vec![0], Vec::new())]] = 1.0;
        for (s_i, stage) in stages.iter().enumerate() {
            for k in -radius..=radius {
                let r = nodes.len() + s_i * (2 * radius as usize + 1) + (k + radius) as usize;
                b[r] = self.marginals[stage].get(&k).copied().unwrap_or(0.0);
            }
        }
        let mut c = Vec::with_capacity(cols.len());
        for (j, (entries, gain)) in cols.iter().enumerate() {
            for &(r, v) in entries {
                a[r][j] += v;
            }
            c.push(*gain);
        }
        maximise(&a, &b, &c).map(|(v, _)| v)
    }
}

/// Payoffs written against the history, separately from the library's
/// expression language.
pub fn lookback(p: &History, h: f64) -> f64 {
    let last = *p.stops.last().unwrap();
    p.positions[..=last].iter().copied().max().unwrap() as f64 * h
}

pub fn realized_variance(p: &History, h: f64) -> f64 {
    *p.stops.last().unwrap() as f64 * h * h
}

pub fn straddle(p: &History, h: f64) -> f64 {
    let x1 = p.positions[p.stops[0]];
    let x2 = p.positions[p.stops[1]];
    (x2 - x1).abs() as f64 * h
}

pub fn asian(p: &History, h: f64) -> f64 {
    let x1 = p.positions[p.stops[0]];
    let x2 = p.positions[p.stops[1]];
    (x1 + x2) as f64 * h / 2.0
}
