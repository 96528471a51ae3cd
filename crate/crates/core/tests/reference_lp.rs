mod oracle;

use std::collections::BTreeMap;

use skorokhod::embedding::{solve_primal, EmbeddingProblem, Expr, PayoffKind, PayoffSpec, Variable, DEFAULT_STATE_CAP};
use skorokhod::measures::DiscreteMeasure;

use oracle::{History, PathTreeProblem};

#[test]
fn textbook_lp() {
    // max 3x + 2y with x + y ≤ 4, x + 3y ≤ 6: optimum x = 4, value 12.
    let a = vec![vec![1.0, 1.0, 1.0, 0.0], vec![1.0, 3.0, 0.0, 1.0]];
    let (v, x) = oracle::maximise(&a, &[4.0, 6.0], &[3.0, 2.0, 0.0, 0.0]).unwrap();
    assert!((v - 12.0).abs() < 1e-12);
    assert!((x[0] - 4.0).abs() < 1e-12);
}

#[test]
fn infeasible_system_is_reported() {
    let a = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
    assert!(oracle::maximise(&a, &[1.0, 2.0], &[1.0, 0.0]).is_none());
}

fn compare(atoms: &[(usize, &[(f64, f64)])], depth: usize, spec: PayoffSpec, reference: fn(&History, f64) -> f64) {
    let measures: BTreeMap<usize, DiscreteMeasure> = atoms
        .iter()
        .map(|&(i, a)| (i, DiscreteMeasure::new(a.iter().copied()).unwrap()))
        .collect();
    let problem = EmbeddingProblem::new(1.0, depth, &measures, &spec, DEFAULT_STATE_CAP).unwrap();
    let lattice_value = solve_primal(&problem).unwrap().value;
    let marginals = atoms
        .iter()
        .map(|&(i, a)| (i, a.iter().map(|&(x, p)| (x.round() as i64, p)).collect()))
        .collect();
    let reference_value = PathTreeProblem {
        h: 1.0,
        depth,
        n: problem.marginals.n(),
        marginals,
        payoff: &reference,
    }
    .solve()
    .unwrap();
    assert!(
        (lattice_value - reference_value).abs() <= 1e-9,
        "lattice {lattice_value} reference {reference_value}"
    );
}

const TWO: &[(f64, f64)] = &[(-1.0, 0.5), (1.0, 0.5)];
const SKEW: &[(f64, f64)] = &[(-2.0, 0.25), (0.0, 0.25), (1.0, 0.5)];
const WIDE: &[(f64, f64)] = &[(-2.0, 0.25), (0.0, 0.5), (2.0, 0.25)];

#[test]
fn single_stop_payoffs_match() {
    compare(&[(1, SKEW)], 5, PayoffSpec::lookback(), oracle::lookback);
    compare(&[(1, SKEW)], 5, PayoffSpec::realized_variance(), oracle::realized_variance);
}

#[test]
fn two_stop_payoffs_match() {
    let d = Expr::sub(Expr::var(Variable::X(2)), Expr::var(Variable::X(1)));
    let straddle = PayoffSpec::new(PayoffKind::MarginalFunctional, Expr::max(d.clone(), Expr::neg(d)));
    compare(&[(1, TWO), (2, WIDE)], 4, straddle.clone(), oracle::straddle);
    compare(&[(2, WIDE)], 4, straddle, oracle::straddle);
    compare(&[(1, TWO), (2, WIDE)], 4, PayoffSpec::lookback(), oracle::lookback);
}
