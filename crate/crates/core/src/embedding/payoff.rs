//! Time-invariant payoffs written as small closed-form expressions over the
//! statistics of a stopped path.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PayoffError {
    #[error("unknown payoff variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{var}` is not allowed for payoff kind {kind:?}")]
    VariableNotAllowed { var: String, kind: PayoffKind },
    #[error("payoff refers to stop {index} but only {available} stops exist")]
    Domain { index: usize, available: usize },
    #[error("payoff constant {0} is not finite")]
    NonFinite(f64),
    #[error("negative exponent {0} is not supported")]
    NegativeExponent(i32),
    #[error("payoff is not bounded above on the lattice")]
    Unbounded,
}

/// Quantities a payoff may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    /// Running maximum of the path up to the last stop.
    Max,
    /// Path value at stop `j` (1-based).
    X(usize),
    /// Quadratic variation (intrinsic time) at stop `j` (1-based).
    S(usize),
    /// `Σ_j x_j` over all stops.
    SumX,
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variable::Max => write!(f, "max"),
            Variable::X(j) => write!(f, "x{j}"),
            Variable::S(j) => write!(f, "s{j}"),
            Variable::SumX => write!(f, "sum_x"),
        }
    }
}

impl FromStr for Variable {
    type Err = PayoffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let indexed = |rest: &str| rest.parse::<usize>().ok().filter(|&j| j >= 1);
        match s {
            "max" => Ok(Variable::Max),
            "sum_x" => Ok(Variable::SumX),
            _ => {
                if let Some(j) = s.strip_prefix('x').and_then(indexed) {
                    Ok(Variable::X(j))
                } else if let Some(j) = s.strip_prefix('s').and_then(indexed) {
                    Ok(Variable::S(j))
                } else {
                    Err(PayoffError::UnknownVariable(s.to_string()))
                }
            }
        }
    }
}

impl Serialize for Variable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Expression vocabulary. In JSON every node is a single-key object, e.g.
/// `{"call": [{"var": "max"}, 0.5]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    Var(Variable),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    /// `(e - K)^+`
    Call(Box<Expr>, f64),
    /// `(K - e)^+`
    Put(Box<Expr>, f64),
}

impl Expr {
    pub fn var(v: Variable) -> Self {
        Expr::Var(v)
    }

    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Self {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn max(a: Expr, b: Expr) -> Self {
        Expr::Max(Box::new(a), Box::new(b))
    }

    pub fn min(a: Expr, b: Expr) -> Self {
        Expr::Min(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, p: i32) -> Self {
        Expr::Pow(Box::new(a), p)
    }

    pub fn call(a: Expr, strike: f64) -> Self {
        Expr::Call(Box::new(a), strike)
    }

    pub fn put(a: Expr, strike: f64) -> Self {
        Expr::Put(Box::new(a), strike)
    }

    pub fn neg(a: Expr) -> Self {
        Expr::sub(Expr::Const(0.0), a)
    }

    fn collect_vars(&self, out: &mut BTreeSet<Variable>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Max(a, b) | Expr::Min(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Pow(a, _) | Expr::Call(a, _) | Expr::Put(a, _) => a.collect_vars(out),
        }
    }

    fn check_literals(&self) -> Result<(), PayoffError> {
        match self {
            Expr::Const(c) | Expr::Call(_, c) | Expr::Put(_, c) if !c.is_finite() => {
                Err(PayoffError::NonFinite(*c))
            }
            Expr::Pow(_, p) if *p < 0 => Err(PayoffError::NegativeExponent(*p)),
            Expr::Const(_) | Expr::Var(_) => Ok(()),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Max(a, b) | Expr::Min(a, b) => {
                a.check_literals()?;
                b.check_literals()
            }
            Expr::Pow(a, _) | Expr::Call(a, _) | Expr::Put(a, _) => a.check_literals(),
        }
    }

    pub fn eval(&self, stats: &PathStatistics) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => stats.get(*v),
            Expr::Add(a, b) => a.eval(stats) + b.eval(stats),
            Expr::Sub(a, b) => a.eval(stats) - b.eval(stats),
            Expr::Mul(a, b) => a.eval(stats) * b.eval(stats),
            Expr::Max(a, b) => a.eval(stats).max(b.eval(stats)),
            Expr::Min(a, b) => a.eval(stats).min(b.eval(stats)),
            Expr::Pow(a, p) => a.eval(stats).powi(*p),
            Expr::Call(a, k) => (a.eval(stats) - k).max(0.0),
            Expr::Put(a, k) => (k - a.eval(stats)).max(0.0),
        }
    }

    /// Interval enclosure of the expression when every variable ranges over
    /// the interval returned by `bounds`.
    pub fn interval(&self, bounds: &dyn Fn(Variable) -> Interval) -> Interval {
        match self {
            Expr::Const(c) => Interval::point(*c),
            Expr::Var(v) => bounds(*v),
            Expr::Add(a, b) => {
                let (a, b) = (a.interval(bounds), b.interval(bounds));
                Interval::new(a.lo + b.lo, a.hi + b.hi)
            }
            Expr::Sub(a, b) => {
                let (a, b) = (a.interval(bounds), b.interval(bounds));
                Interval::new(a.lo - b.hi, a.hi - b.lo)
            }
            Expr::Mul(a, b) => {
                let (a, b) = (a.interval(bounds), b.interval(bounds));
                let c = [a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi];
                Interval::new(
                    c.iter().copied().fold(f64::INFINITY, f64::min),
                    c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            }
            Expr::Max(a, b) => {
                let (a, b) = (a.interval(bounds), b.interval(bounds));
                Interval::new(a.lo.max(b.lo), a.hi.max(b.hi))
            }
            Expr::Min(a, b) => {
                let (a, b) = (a.interval(bounds), b.interval(bounds));
                Interval::new(a.lo.min(b.lo), a.hi.min(b.hi))
            }
            Expr::Pow(a, p) => {
                let a = a.interval(bounds);
                let (lo, hi) = (a.lo.powi(*p), a.hi.powi(*p));
                if *p == 0 {
                    Interval::point(1.0)
                } else if p % 2 == 1 {
                    Interval::new(lo, hi)
                } else if a.lo >= 0.0 {
                    Interval::new(lo, hi)
                } else if a.hi <= 0.0 {
                    Interval::new(hi, lo)
                } else {
                    Interval::new(0.0, lo.max(hi))
                }
            }
            Expr::Call(a, k) => {
                let a = a.interval(bounds);
                Interval::new((a.lo - k).max(0.0), (a.hi - k).max(0.0))
            }
            Expr::Put(a, k) => {
                let a = a.interval(bounds);
                Interval::new((k - a.hi).max(0.0), (k - a.lo).max(0.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }
}

/// Payoff families; each restricts which statistics the expression may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    /// Function of the running maximum.
    Lookback,
    /// Function of the stop times in intrinsic time.
    RealizedVariance,
    /// Function of the stopped values and stop times.
    MarginalFunctional,
    /// Function of the sum of stopped values.
    DiscreteAsian,
    /// Any combination of the above.
    Composite,
}

impl PayoffKind {
    fn allows(&self, v: Variable) -> bool {
        match self {
            PayoffKind::Lookback => matches!(v, Variable::Max),
            PayoffKind::RealizedVariance => matches!(v, Variable::S(_)),
            PayoffKind::MarginalFunctional => matches!(v, Variable::X(_) | Variable::S(_)),
            PayoffKind::DiscreteAsian => matches!(v, Variable::SumX),
            PayoffKind::Composite => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
    /// Defaults: lookback `max`, realized variance `s_n`, Asian `sum_x / n`;
    /// required for the other kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<Expr>,
}

impl PayoffSpec {
    pub fn new(kind: PayoffKind, expr: Expr) -> Self {
        Self {
            kind,
            expr: Some(expr),
        }
    }

    pub fn lookback() -> Self {
        Self {
            kind: PayoffKind::Lookback,
            expr: None,
        }
    }

    pub fn realized_variance() -> Self {
        Self {
            kind: PayoffKind::RealizedVariance,
            expr: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(PayoffKind::Composite, Expr::Const(c))
    }

    /// Resolve defaults and check the expression against `n` stops.
    pub fn compile(&self, n: usize) -> Result<Payoff, PayoffError> {
        let expr = match (&self.expr, self.kind) {
            (Some(e), _) => e.clone(),
            (None, PayoffKind::Lookback) => Expr::Var(Variable::Max),
            (None, PayoffKind::RealizedVariance) => Expr::Var(Variable::S(n)),
            (None, PayoffKind::DiscreteAsian) => {
                Expr::mul(Expr::Var(Variable::SumX), Expr::Const(1.0 / n as f64))
            }
            (None, PayoffKind::MarginalFunctional | PayoffKind::Composite) => {
                Expr::Var(Variable::X(n))
            }
        };
        expr.check_literals()?;
        let mut vars = BTreeSet::new();
        expr.collect_vars(&mut vars);
        for v in &vars {
            if !self.kind.allows(*v) {
                return Err(PayoffError::VariableNotAllowed {
                    var: v.to_string(),
                    kind: self.kind,
                });
            }
            if let Variable::X(j) | Variable::S(j) = v {
                if *j > n {
                    return Err(PayoffError::Domain {
                        index: *j,
                        available: n,
                    });
                }
            }
        }
        Ok(Payoff { expr, vars, n })
    }
}

/// A validated payoff for a fixed number of stops.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoff {
    expr: Expr,
    vars: BTreeSet<Variable>,
    n: usize,
}

impl Payoff {
    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn n_stops(&self) -> usize {
        self.n
    }

    pub fn uses(&self, v: Variable) -> bool {
        self.vars.contains(&v)
    }

    pub fn variables(&self) -> impl Iterator<Item = Variable> + '_ {
        self.vars.iter().copied()
    }

    pub fn eval(&self, stats: &PathStatistics) -> f64 {
        self.expr.eval(stats)
    }

    /// Negated payoff over the same statistics.
    pub fn negated(&self) -> Payoff {
        Payoff {
            expr: Expr::neg(self.expr.clone()),
            vars: self.vars.clone(),
            n: self.n,
        }
    }

    /// Upper bound over paths of at most `depth` steps of size `h`.
    pub fn upper_bound(&self, h: f64, depth: usize) -> Result<f64, PayoffError> {
        let reach = h * depth as f64;
        let horizon = h * h * depth as f64;
        let n = self.n as f64;
        let bounds = move |v: Variable| match v {
            Variable::Max => Interval::new(0.0, reach),
            Variable::X(_) => Interval::new(-reach, reach),
            Variable::S(_) => Interval::new(0.0, horizon),
            Variable::SumX => Interval::new(-n * reach, n * reach),
        };
        let hi = self.expr.interval(&bounds).hi;
        if hi.is_finite() {
            Ok(hi)
        } else {
            Err(PayoffError::Unbounded)
        }
    }
}

/// Statistics of a path stopped at `s_1 ≤ … ≤ s_n` (intrinsic time).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathStatistics {
    pub max: f64,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
}

impl PathStatistics {
    pub fn get(&self, v: Variable) -> f64 {
        match v {
            Variable::Max => self.max,
            Variable::X(j) => self.x[j - 1],
            Variable::S(j) => self.s[j - 1],
            Variable::SumX => self.x.iter().sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats() -> PathStatistics {
        PathStatistics {
            max: 2.0,
            x: vec![1.0, -1.0],
            s: vec![0.5, 3.0],
        }
    }

    #[test]
    fn variable_names_round_trip() {
        for v in [Variable::Max, Variable::X(2), Variable::S(1), Variable::SumX] {
            assert_eq!(v.to_string().parse::<Variable>().unwrap(), v);
        }
        assert!("x0".parse::<Variable>().is_err());
        assert!("y".parse::<Variable>().is_err());
    }

    #[test]
    fn defaults_per_kind() {
        let s = stats();
        assert_eq!(PayoffSpec::lookback().compile(2).unwrap().eval(&s), 2.0);
        assert_eq!(PayoffSpec::realized_variance().compile(2).unwrap().eval(&s), 3.0);
        let asian = PayoffSpec {
            kind: PayoffKind::DiscreteAsian,
            expr: None,
        };
        assert_eq!(asian.compile(2).unwrap().eval(&s), 0.0);
    }

    #[test]
    fn json_form() {
        let text = r#"{"kind": "marginal_functional",
                       "expr": {"max": [{"sub": [{"var": "x2"}, {"var": "x1"}]},
                                        {"sub": [{"var": "x1"}, {"var": "x2"}]}]}}"#;
        let spec: PayoffSpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.compile(2).unwrap().eval(&stats()), 2.0);
        let back: PayoffSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let call: Expr = serde_json::from_str(r#"{"call": [{"var": "max"}, 0.5]}"#).unwrap();
        assert_eq!(call.eval(&stats()), 1.5);
    }

    #[test]
    fn kind_restrictions() {
        let bad = PayoffSpec::new(PayoffKind::Lookback, Expr::Var(Variable::S(1)));
        assert!(matches!(bad.compile(1), Err(PayoffError::VariableNotAllowed { .. })));
        let beyond = PayoffSpec::new(PayoffKind::RealizedVariance, Expr::Var(Variable::S(3)));
        assert_eq!(
            beyond.compile(2),
            Err(PayoffError::Domain {
                index: 3,
                available: 2
            })
        );
    }

    #[test]
    fn interval_bounds() {
        let p = PayoffSpec::new(
            PayoffKind::Composite,
            Expr::sub(Expr::pow(Expr::var(Variable::Max), 2), Expr::var(Variable::S(1))),
        )
        .compile(1)
        .unwrap();
        // max ∈ [0, 4], s ∈ [0, 4] for h = 1, depth 4.
        assert_eq!(p.upper_bound(1.0, 4).unwrap(), 16.0);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(Expr::Const),
            Just(Expr::Var(Variable::Max)),
            Just(Expr::Var(Variable::X(1))),
            Just(Expr::Var(Variable::S(1))),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::max(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::min(a, b)),
                (inner.clone(), 0i32..4).prop_map(|(a, p)| Expr::pow(a, p)),
                (inner.clone(), -1.0f64..1.0).prop_map(|(a, k)| Expr::call(a, k)),
                (inner, -1.0f64..1.0).prop_map(|(a, k)| Expr::put(a, k)),
            ]
        })
    }

    proptest! {
        #[test]
        fn interval_encloses_values(e in arb_expr(), m in 0.0f64..3.0, x in -3.0f64..3.0, s in 0.0f64..3.0) {
            let p = PayoffSpec::new(PayoffKind::Composite, e).compile(1).unwrap();
            let st = PathStatistics { max: m.max(x), x: vec![x], s: vec![s] };
            let v = p.eval(&st);
            let ub = p.upper_bound(1.0, 3).unwrap();
            prop_assert!(v <= ub + 1e-9 * (1.0 + ub.abs()), "{} > {}", v, ub);
        }
    }
}
