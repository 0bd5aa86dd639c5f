//! Boolean satisfaction and the quantitative semantics: space robustness (min/max),
//! average space robustness, and its simplified form with a chosen witness step `k1`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Formula, Interval, PredicateMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustnessError {
    #[error("evaluation needs steps {from}..={to} but the signal covers {start}..={end}")]
    WindowTooShort { from: i64, to: i64, start: i64, end: i64 },
    #[error("k1 = {k1} chosen for temporal node {node} at k = {k} lies outside [{lo}, {hi}]")]
    PolicyOutOfRange { node: usize, k: i64, k1: i64, lo: i64, hi: i64 },
    #[error("no k1 configured for temporal node {node} at k = {k}")]
    PolicyMissing { node: usize, k: i64 },
    #[error("formula references predicate p{} but the signal has {dim} channels", index + 1)]
    PredicateIndex { index: usize, dim: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Predicate vectors `z(k)` on the contiguous step range `start..start+len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    start: i64,
    values: Vec<Vec<f64>>,
}

impl Signal {
    pub fn new(start: i64, values: Vec<Vec<f64>>) -> Result<Self, RobustnessError> {
        if let Some(first) = values.first() {
            let dim = first.len();
            if let Some(bad) = values.iter().position(|v| v.len() != dim) {
                return Err(RobustnessError::Dimension(format!(
                    "sample {} has {} channels, expected {dim}",
                    start + bad as i64,
                    values[bad].len()
                )));
            }
        }
        Ok(Signal { start, values })
    }

    /// Single-channel signal starting at step 0.
    pub fn scalar(values: &[f64]) -> Self {
        Signal { start: 0, values: values.iter().map(|&v| vec![v]).collect() }
    }

    /// Builds a signal from channel-major data: `channels[i][t]` is `z_{i+1}(start + t)`.
    pub fn from_channels(start: i64, channels: &[Vec<f64>]) -> Result<Self, RobustnessError> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(RobustnessError::Dimension("channels of unequal length".into()));
        }
        let values = (0..len).map(|t| channels.iter().map(|c| c[t]).collect()).collect();
        Ok(Signal { start, values })
    }

    /// Maps a state sequence through `pm`.
    pub fn from_states(pm: &PredicateMap, start: i64, states: &[Vec<f64>]) -> Result<Self, RobustnessError> {
        let values = states.iter().map(|x| eval_predicates(pm, x)).collect::<Result<Vec<_>, _>>()?;
        Ok(Signal { start, values })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    /// Last covered step; `start - 1` for an empty signal.
    pub fn end(&self) -> i64 {
        self.start + self.values.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, k: i64) -> Option<&[f64]> {
        if k < self.start {
            return None;
        }
        self.values.get((k - self.start) as usize).map(Vec::as_slice)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn at(&self, k: i64) -> Result<&[f64], RobustnessError> {
        self.get(k).ok_or(RobustnessError::WindowTooShort { from: k, to: k, start: self.start, end: self.end() })
    }
}

/// `z = C·x + c`.
pub fn eval_predicates(pm: &PredicateMap, x: &[f64]) -> Result<Vec<f64>, RobustnessError> {
    if x.len() != pm.state_dim() {
        return Err(RobustnessError::Dimension(format!(
            "state has {} entries, predicate map expects {}",
            x.len(),
            pm.state_dim()
        )));
    }
    let c = pm.matrix();
    Ok((0..pm.len())
        .map(|i| pm.offset()[i] + (0..x.len()).map(|j| c[(i, j)] * x[j]).sum::<f64>())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalKind {
    Until,
    Eventually,
    Always,
}

impl fmt::Display for TemporalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalKind::Until => "U",
            TemporalKind::Eventually => "F",
            TemporalKind::Always => "G",
        })
    }
}

/// Request for the witness step of an until or eventually node evaluated at `k`.
/// `node` is the pre-order index of the node among the temporal operators of the formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct K1Query {
    pub node: usize,
    pub kind: TemporalKind,
    pub k: i64,
    pub interval: Interval,
}

impl K1Query {
    pub fn earliest(&self) -> i64 {
        self.k + self.interval.lo() as i64
    }

    pub fn latest(&self) -> i64 {
        self.k + self.interval.hi() as i64
    }
}

/// Chooses `k1` for until and eventually nodes. The choice must lie in `[k+a, k+b]`.
pub trait K1Policy: Sync {
    fn choose(&self, query: &K1Query) -> Result<i64, RobustnessError>;
}

impl<F> K1Policy for F
where
    F: Fn(&K1Query) -> i64 + Sync,
{
    fn choose(&self, query: &K1Query) -> Result<i64, RobustnessError> {
        Ok(self(query))
    }
}

/// `k1 = k + b`: the latest step of the interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LatestK1;

impl K1Policy for LatestK1 {
    fn choose(&self, query: &K1Query) -> Result<i64, RobustnessError> {
        Ok(query.latest())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum K1Choice {
    /// `k1 = k + offset`.
    Offset(u32),
    /// `k1 = k + a`.
    Earliest,
    /// `k1 = k + b`.
    Latest,
    /// Absolute `k -> k1` pairs.
    Table(BTreeMap<i64, i64>),
}

/// Per-node choices; nodes without an entry use `k + b`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct K1Plan {
    choices: BTreeMap<usize, K1Choice>,
}

impl K1Plan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, node: usize, choice: K1Choice) -> Self {
        self.choices.insert(node, choice);
        self
    }

    pub fn set(&mut self, node: usize, choice: K1Choice) {
        self.choices.insert(node, choice);
    }

    pub fn get(&self, node: usize) -> Option<&K1Choice> {
        self.choices.get(&node)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &K1Choice)> {
        self.choices.iter().map(|(n, c)| (*n, c))
    }
}

impl K1Policy for K1Plan {
    fn choose(&self, q: &K1Query) -> Result<i64, RobustnessError> {
        Ok(match self.choices.get(&q.node) {
            None | Some(K1Choice::Latest) => q.latest(),
            Some(K1Choice::Earliest) => q.earliest(),
            Some(K1Choice::Offset(o)) => q.k + *o as i64,
            Some(K1Choice::Table(t)) => {
                *t.get(&q.k).ok_or(RobustnessError::PolicyMissing { node: q.node, k: q.k })?
            }
        })
    }
}

/// Asks `policy` for `k1` and checks it against the interval.
pub fn checked_k1(policy: &dyn K1Policy, query: &K1Query) -> Result<i64, RobustnessError> {
    let k1 = policy.choose(query)?;
    let (lo, hi) = (query.earliest(), query.latest());
    if k1 < lo || k1 > hi {
        return Err(RobustnessError::PolicyOutOfRange { node: query.node, k: query.k, k1, lo, hi });
    }
    Ok(k1)
}

fn check_window(f: &Formula, s: &Signal, k: i64) -> Result<(), RobustnessError> {
    if let Some(index) = f.max_predicate_index() {
        if index >= s.dim() {
            return Err(RobustnessError::PredicateIndex { index, dim: s.dim() });
        }
    }
    let to = k + f.length() as i64;
    if s.is_empty() || k < s.start() || to > s.end() {
        return Err(RobustnessError::WindowTooShort { from: k, to, start: s.start(), end: s.end() });
    }
    Ok(())
}

fn window(k: i64, iv: &Interval) -> std::ops::RangeInclusive<i64> {
    (k + iv.lo() as i64)..=(k + iv.hi() as i64)
}

/// Satisfaction relation; predicates hold when their value is `>= 0`.
pub fn boolean_sat(f: &Formula, s: &Signal, k: i64) -> Result<bool, RobustnessError> {
    check_window(f, s, k)?;
    sat(f, s, k)
}

fn sat(f: &Formula, s: &Signal, k: i64) -> Result<bool, RobustnessError> {
    Ok(match f {
        Formula::Predicate(l) => l.value(s.at(k)?) >= 0.0,
        Formula::And(cs) => {
            for c in cs {
                if !sat(c, s, k)? {
                    return Ok(false);
                }
            }
            true
        }
        Formula::Or(cs) => {
            for c in cs {
                if sat(c, s, k)? {
                    return Ok(true);
                }
            }
            false
        }
        Formula::Until { lhs, rhs, interval } => {
            for k1 in window(k, interval) {
                if sat(rhs, s, k1)? {
                    let mut held = true;
                    for k2 in k..=k1 {
                        if !sat(lhs, s, k2)? {
                            held = false;
                            break;
                        }
                    }
                    if held {
                        return Ok(true);
                    }
                }
            }
            false
        }
        Formula::Eventually { child, interval } => {
            for k1 in window(k, interval) {
                if sat(child, s, k1)? {
                    return Ok(true);
                }
            }
            false
        }
        Formula::Always { child, interval } => {
            for k1 in window(k, interval) {
                if !sat(child, s, k1)? {
                    return Ok(false);
                }
            }
            true
        }
    })
}

#[derive(Clone, Copy)]
enum Semantics<'a> {
    Space,
    Average,
    Simplified(&'a dyn K1Policy),
}

/// Min/max space robustness.
pub fn space_robustness(f: &Formula, s: &Signal, k: i64) -> Result<f64, RobustnessError> {
    check_window(f, s, k)?;
    quantitative(Semantics::Space, f, s, k, 0)
}

/// Average space robustness: windows of `G` and the left operand of `U` are averaged.
pub fn dasr(f: &Formula, s: &Signal, k: i64) -> Result<f64, RobustnessError> {
    check_window(f, s, k)?;
    quantitative(Semantics::Average, f, s, k, 0)
}

/// Average space robustness with the maximization over `k1` replaced by `policy`.
pub fn dsasr(f: &Formula, s: &Signal, k: i64, policy: &dyn K1Policy) -> Result<f64, RobustnessError> {
    check_window(f, s, k)?;
    quantitative(Semantics::Simplified(policy), f, s, k, 0)
}

/// `Σ_{k=from}^{to} dsasr(f, s, k)`.
pub fn dsasr_sum(f: &Formula, s: &Signal, from: i64, to: i64, policy: &dyn K1Policy) -> Result<f64, RobustnessError> {
    (from..=to).map(|k| dsasr(f, s, k, policy)).sum()
}

fn max_of(it: impl Iterator<Item = Result<f64, RobustnessError>>) -> Result<f64, RobustnessError> {
    it.fold(Ok(f64::NEG_INFINITY), |acc, v| Ok(acc?.max(v?)))
}

fn min_of(it: impl Iterator<Item = Result<f64, RobustnessError>>) -> Result<f64, RobustnessError> {
    it.fold(Ok(f64::INFINITY), |acc, v| Ok(acc?.min(v?)))
}

fn mean_of(it: impl Iterator<Item = Result<f64, RobustnessError>>) -> Result<f64, RobustnessError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v?;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// `node` is the pre-order index of `f` itself if it is temporal, otherwise of its first
/// temporal descendant.
fn quantitative(sem: Semantics, f: &Formula, s: &Signal, k: i64, node: usize) -> Result<f64, RobustnessError> {
    let rec = |g: &Formula, k: i64, node: usize| quantitative(sem, g, s, k, node);
    match f {
        Formula::Predicate(l) => Ok(l.value(s.at(k)?)),
        Formula::And(cs) | Formula::Or(cs) => {
            let mut id = node;
            let mut vals = Vec::with_capacity(cs.len());
            for c in cs {
                vals.push(rec(c, k, id));
                id += c.temporal_count();
            }
            if matches!(f, Formula::And(_)) {
                min_of(vals.into_iter())
            } else {
                max_of(vals.into_iter())
            }
        }
        Formula::Until { lhs, rhs, interval } => {
            let lhs_id = node + 1;
            let rhs_id = lhs_id + lhs.temporal_count();
            match sem {
                Semantics::Space => max_of(window(k, interval).map(|k1| {
                    let held = min_of((k..=k1).map(|k2| rec(lhs, k2, lhs_id)))?;
                    Ok(held.min(rec(rhs, k1, rhs_id)?))
                })),
                Semantics::Average => max_of(window(k, interval).map(|k1| {
                    let avg = mean_of((k..=k1).map(|k2| rec(lhs, k2, lhs_id)))?;
                    Ok(0.5 * (avg + rec(rhs, k1, rhs_id)?))
                })),
                Semantics::Simplified(policy) => {
                    let q = K1Query { node, kind: TemporalKind::Until, k, interval: *interval };
                    let k1 = checked_k1(policy, &q)?;
                    let avg = mean_of((k..=k1).map(|k2| rec(lhs, k2, lhs_id)))?;
                    Ok(0.5 * (avg + rec(rhs, k1, rhs_id)?))
                }
            }
        }
        Formula::Eventually { child, interval } => match sem {
            Semantics::Space | Semantics::Average => max_of(window(k, interval).map(|k1| rec(child, k1, node + 1))),
            Semantics::Simplified(policy) => {
                let q = K1Query { node, kind: TemporalKind::Eventually, k, interval: *interval };
                let k1 = checked_k1(policy, &q)?;
                rec(child, k1, node + 1)
            }
        },
        Formula::Always { child, interval } => match sem {
            Semantics::Space => min_of(window(k, interval).map(|k1| rec(child, k1, node + 1))),
            Semantics::Average | Semantics::Simplified(_) => {
                mean_of(window(k, interval).map(|k1| rec(child, k1, node + 1)))
            }
        },
    }
}
