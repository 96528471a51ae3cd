//! Binomial martingale lattice with Markovian state augmentation.
//!
//! A state is a walk node `(k, m)` (position `k·h` after `m` steps) plus the
//! running maximum when the payoff needs it, the number of stops already
//! made, and the stopped values/times of earlier stops that the payoff reads.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::payoff::{PathStatistics, Payoff, Variable};

/// Default cap on the number of lattice states.
pub const DEFAULT_STATE_CAP: usize = 5_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("lattice needs {states} states, above the cap of {cap}")]
    StateBudgetExceeded { states: usize, cap: usize },
    #[error("invalid lattice parameters: {0}")]
    Invalid(String),
}

/// What an earlier stop leaves behind in the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemorySlot {
    /// Grid index of the value at stop `j`.
    Value(usize),
    /// Step count at stop `j`.
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateKey {
    pub stage: usize,
    pub k: i32,
    pub m: u32,
    /// Grid index of the running maximum (0 when not tracked).
    pub max: i32,
    pub memory: Vec<i32>,
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.stage, self.k, self.m, self.max)?;
        for (i, v) in self.memory.iter().enumerate() {
            write!(f, "{}{v}", if i == 0 { ":" } else { "," })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for StateKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 4 || parts.len() > 5 {
            return Err(format!("malformed state key `{s}`"));
        }
        let num = |p: &str| p.parse::<i64>().map_err(|e| format!("`{s}`: {e}"));
        let memory = match parts.get(4) {
            Some(m) if !m.is_empty() => m
                .split(',')
                .map(|v| num(v).map(|x| x as i32))
                .collect::<Result<_, _>>()?,
            _ => Vec::new(),
        };
        Ok(StateKey {
            stage: num(parts[0])? as usize,
            k: num(parts[1])? as i32,
            m: num(parts[2])? as u32,
            max: num(parts[3])? as i32,
            memory,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub key: StateKey,
    /// Same-stage successors after one step up / down (none at full depth).
    pub up: Option<usize>,
    pub down: Option<usize>,
    /// State entered by stopping here when further stops remain.
    pub advance: Option<usize>,
}

/// Which augmentations the lattice carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub running_max: bool,
    pub stage: bool,
    pub memory: Vec<MemorySlot>,
}

#[derive(Debug, Clone)]
pub struct LatticeModel {
    h: f64,
    depth: usize,
    n_stages: usize,
    augmentation: Augmentation,
    states: Vec<State>,
    index: HashMap<StateKey, usize>,
    node_count: usize,
    /// First state index of every layer `m`, plus a final sentinel.
    layer_start: Vec<usize>,
}

impl LatticeModel {
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of stops `n`.
    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn augmentation(&self) -> &Augmentation {
        &self.augmentation
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &State {
        &self.states[i]
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn find(&self, key: &StateKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Distinct walk nodes `(k, m)` reachable within the depth.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Live states plus one absorbing marker per layer that records where
    /// the final stop happened.
    pub fn state_count(&self) -> usize {
        self.states.len() + self.depth + 1
    }

    pub fn layer(&self, m: usize) -> std::ops::Range<usize> {
        self.layer_start[m]..self.layer_start[m + 1]
    }

    pub fn position(&self, i: usize) -> f64 {
        self.states[i].key.k as f64 * self.h
    }

    /// Intrinsic time `m·h²` of a state.
    pub fn clock(&self, i: usize) -> f64 {
        self.states[i].key.m as f64 * self.h * self.h
    }

    pub fn is_final_stage(&self, i: usize) -> bool {
        self.states[i].key.stage + 1 == self.n_stages
    }

    /// Statistics of any path that makes its final stop at state `i`.
    pub fn final_statistics(&self, i: usize) -> PathStatistics {
        let key = &self.states[i].key;
        let n = self.n_stages;
        let mut x = vec![0.0; n];
        let mut s = vec![0.0; n];
        for (slot, v) in self.augmentation.memory.iter().zip(&key.memory) {
            match *slot {
                MemorySlot::Value(j) => x[j - 1] = *v as f64 * self.h,
                MemorySlot::Steps(j) => s[j - 1] = *v as f64 * self.h * self.h,
            }
        }
        x[n - 1] = key.k as f64 * self.h;
        s[n - 1] = key.m as f64 * self.h * self.h;
        PathStatistics {
            max: key.max as f64 * self.h,
            x,
            s,
        }
    }

    pub fn final_payoff(&self, i: usize, payoff: &Payoff) -> f64 {
        payoff.eval(&self.final_statistics(i))
    }
}

/// Build the reachable state graph for `n_stages` stops of the symmetric
/// `±h` walk run for at most `depth` steps, with the augmentation the
/// payoff requires.
pub fn build_lattice(
    h: f64,
    depth: usize,
    payoff: &Payoff,
    n_stages: usize,
    state_cap: usize,
) -> Result<LatticeModel, LatticeError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(LatticeError::Invalid(format!("step must be positive, got {h}")));
    }
    if depth < 1 {
        return Err(LatticeError::Invalid("depth must be at least 1".into()));
    }
    if n_stages < 1 {
        return Err(LatticeError::Invalid("need at least one stop".into()));
    }
    if payoff.n_stops() != n_stages {
        return Err(LatticeError::Invalid(format!(
            "payoff is written for {} stops, lattice has {n_stages}",
            payoff.n_stops()
        )));
    }
    let running_max = payoff.uses(Variable::Max);
    let mut memory = Vec::new();
    for j in 1..n_stages {
        if payoff.uses(Variable::X(j)) || payoff.uses(Variable::SumX) {
            memory.push(MemorySlot::Value(j));
        }
        if payoff.uses(Variable::S(j)) {
            memory.push(MemorySlot::Steps(j));
        }
    }
    let augmentation = Augmentation {
        running_max,
        stage: n_stages > 1,
        memory,
    };

    let mut states: Vec<State> = Vec::new();
    let mut index: HashMap<StateKey, usize> = HashMap::new();
    let mut layer_start = Vec::with_capacity(depth + 2);

    // Per layer, per stage: keys in discovery order.
    let mut next_layer: Vec<Vec<StateKey>> = vec![Vec::new(); n_stages];
    next_layer[0].push(StateKey {
        stage: 0,
        k: 0,
        m: 0,
        max: 0,
        memory: Vec::new(),
    });
    let mut pending_links: Vec<(usize, StateKey, StateKey)> = Vec::new();

    for m in 0..=depth {
        layer_start.push(states.len());
        let mut current = std::mem::replace(&mut next_layer, vec![Vec::new(); n_stages]);
        let mut seen_next: HashMap<StateKey, ()> = HashMap::new();
        for stage in 0..n_stages {
            let mut i = 0;
            while i < current[stage].len() {
                let key = current[stage][i].clone();
                i += 1;
                if index.contains_key(&key) {
                    continue;
                }
                let id = states.len();
                index.insert(key.clone(), id);
                states.push(State {
                    key: key.clone(),
                    up: None,
                    down: None,
                    advance: None,
                });
                if states.len() > state_cap {
                    return Err(LatticeError::StateBudgetExceeded {
                        states: states.len(),
                        cap: state_cap,
                    });
                }
                if stage + 1 < n_stages {
                    current[stage + 1].push(advance_key(&key, &augmentation.memory));
                }
                if m < depth {
                    let up = step(&key, 1, running_max);
                    let down = step(&key, -1, running_max);
                    for succ in [&up, &down] {
                        if seen_next.insert(succ.clone(), ()).is_none() {
                            next_layer[stage].push(succ.clone());
                        }
                    }
                    pending_links.push((id, up, down));
                }
            }
        }
        // Stops made inside the layer.
        for stage in 0..n_stages.saturating_sub(1) {
            for key in &current[stage] {
                let id = index[key];
                if states[id].advance.is_none() {
                    states[id].advance = Some(index[&advance_key(key, &augmentation.memory)]);
                }
            }
        }
    }
    layer_start.push(states.len());
    for (id, up, down) in pending_links {
        states[id].up = Some(index[&up]);
        states[id].down = Some(index[&down]);
    }
    let node_count = (0..=depth).map(|m| m + 1).sum();
    Ok(LatticeModel {
        h,
        depth,
        n_stages,
        augmentation,
        states,
        index,
        node_count,
        layer_start,
    })
}

/// Key after stopping at `key`: the stage moves on and the memory records
/// what the payoff needs from this stop.
fn advance_key(key: &StateKey, layout: &[MemorySlot]) -> StateKey {
    let stop = key.stage + 1;
    let mut next = key.clone();
    next.stage = stop;
    for slot in layout {
        match *slot {
            MemorySlot::Value(j) if j == stop => next.memory.push(key.k),
            MemorySlot::Steps(j) if j == stop => next.memory.push(key.m as i32),
            _ => {}
        }
    }
    next
}

fn step(key: &StateKey, dir: i32, running_max: bool) -> StateKey {
    let k = key.k + dir;
    StateKey {
        stage: key.stage,
        k,
        m: key.m + 1,
        max: if running_max { key.max.max(k) } else { 0 },
        memory: key.memory.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::payoff::{Expr, PayoffKind, PayoffSpec};

    fn rv(n: usize) -> Payoff {
        PayoffSpec::realized_variance().compile(n).unwrap()
    }

    #[test]
    fn small_lattice_counts() {
        let l = build_lattice(1.0, 2, &rv(1), 1, DEFAULT_STATE_CAP).unwrap();
        // (0,0), (±1,1), (0,2), (±2,2)
        assert_eq!(l.len(), 6);
        assert_eq!(l.node_count(), 6);
        assert_eq!(l.state_count(), 9);
        for s in l.states() {
            assert!(s.key.k.unsigned_abs() <= s.key.m);
            assert_eq!((s.key.k + s.key.m as i32).rem_euclid(2), 0);
        }
    }

    #[test]
    fn successors_are_symmetric_steps() {
        let l = build_lattice(0.5, 5, &PayoffSpec::lookback().compile(1).unwrap(), 1, DEFAULT_STATE_CAP)
            .unwrap();
        for (i, s) in l.states().iter().enumerate() {
            assert!(s.key.max >= s.key.k && s.key.max >= 0);
            match (s.up, s.down) {
                (Some(u), Some(d)) => {
                    let change = 0.5 * (l.position(u) - l.position(i)) + 0.5 * (l.position(d) - l.position(i));
                    assert_eq!(change, 0.0);
                    assert_eq!(l.state(u).key.m, s.key.m + 1);
                }
                (None, None) => assert_eq!(s.key.m as usize, l.depth()),
                _ => panic!("one-sided state"),
            }
        }
    }

    #[test]
    fn two_stops_double_the_states() {
        let one = build_lattice(1.0, 4, &rv(1), 1, DEFAULT_STATE_CAP).unwrap();
        let two = build_lattice(1.0, 4, &rv(2), 2, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(two.len(), 2 * one.len());
        assert!(two.augmentation().stage);
        for (i, s) in two.states().iter().enumerate() {
            if s.key.stage == 0 {
                let a = s.advance.expect("stage 0 can stop");
                assert_eq!(two.state(a).key.stage, 1);
                assert!(a > i);
            } else {
                assert!(s.advance.is_none());
            }
        }
    }

    #[test]
    fn memory_follows_payoff() {
        let spread = PayoffSpec::new(
            PayoffKind::MarginalFunctional,
            Expr::sub(Expr::var(Variable::X(2)), Expr::var(Variable::X(1))),
        )
        .compile(2)
        .unwrap();
        let l = build_lattice(1.0, 3, &spread, 2, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(l.augmentation().memory, vec![MemorySlot::Value(1)]);
        for (i, s) in l.states().iter().enumerate() {
            if s.key.stage == 1 {
                let st = l.final_statistics(i);
                assert_eq!(st.x[0], s.key.memory[0] as f64);
                assert_eq!(st.x[1], s.key.k as f64);
            }
        }
    }

    #[test]
    fn ordering_is_topological() {
        let l = build_lattice(1.0, 5, &rv(3), 3, DEFAULT_STATE_CAP).unwrap();
        for (i, s) in l.states().iter().enumerate() {
            for j in [s.up, s.down, s.advance].into_iter().flatten() {
                assert!(j > i);
            }
        }
        for m in 0..=l.depth() {
            for i in l.layer(m) {
                assert_eq!(l.state(i).key.m as usize, m);
            }
        }
    }

    #[test]
    fn key_round_trip() {
        let k = StateKey {
            stage: 1,
            k: -3,
            m: 5,
            max: 2,
            memory: vec![1, -2],
        };
        assert_eq!(k.to_string().parse::<StateKey>().unwrap(), k);
        let bare = StateKey {
            memory: vec![],
            ..k
        };
        assert_eq!(bare.to_string().parse::<StateKey>().unwrap(), bare);
    }

    #[test]
    fn state_cap_is_enforced() {
        let err = build_lattice(1.0, 50, &rv(1), 1, 100).unwrap_err();
        assert!(matches!(err, LatticeError::StateBudgetExceeded { cap: 100, .. }));
    }
}
