//! STL formulas of the supported fragment.
//!
//! Formulas are kept in positive normal form: negation is a flag on a predicate and
//! cannot be applied anywhere else. Temporal intervals are closed, bounded, and counted
//! in sampling steps.

mod parser;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parser::{parse_formula, parse_specification, IntervalUnits, ParseError, ParseOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("interval [{lo},{hi}] has lower bound above upper bound")]
    EmptyInterval { lo: u32, hi: u32 },
    #[error("formula references predicate p{} but only {available} predicates are defined", index + 1)]
    UnknownPredicate { index: usize, available: usize },
    #[error("predicate map: {0}")]
    PredicateMap(String),
}

/// Closed integer interval `[lo, hi]` of sampling steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    lo: u32,
    hi: u32,
}

impl Interval {
    pub fn new(lo: u32, hi: u32) -> Result<Self, FormulaError> {
        if lo > hi {
            return Err(FormulaError::EmptyInterval { lo, hi });
        }
        Ok(Interval { lo, hi })
    }

    pub fn lo(&self) -> u32 {
        self.lo
    }

    pub fn hi(&self) -> u32 {
        self.hi
    }

    /// Number of steps in the interval, `hi - lo + 1`.
    pub fn len(&self) -> u32 {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains_offset(&self, offset: i64) -> bool {
        offset >= self.lo as i64 && offset <= self.hi as i64
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

/// A predicate reference, possibly negated. `index` is zero-based; the text form
/// `p1` refers to index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal {
    pub index: usize,
    pub negated: bool,
}

impl Literal {
    pub fn new(index: usize) -> Self {
        Literal { index, negated: false }
    }

    pub fn negated(index: usize) -> Self {
        Literal { index, negated: true }
    }

    pub fn sign(&self) -> f64 {
        if self.negated {
            -1.0
        } else {
            1.0
        }
    }

    /// Value of the literal given the predicate vector `z`.
    pub fn value(&self, z: &[f64]) -> f64 {
        self.sign() * z[self.index]
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("!")?;
        }
        write!(f, "p{}", self.index + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Predicate(Literal),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Until { lhs: Box<Formula>, rhs: Box<Formula>, interval: Interval },
    Eventually { child: Box<Formula>, interval: Interval },
    Always { child: Box<Formula>, interval: Interval },
}

impl Formula {
    pub fn pred(index: usize) -> Self {
        Formula::Predicate(Literal::new(index))
    }

    pub fn not_pred(index: usize) -> Self {
        Formula::Predicate(Literal::negated(index))
    }

    pub fn and(children: Vec<Formula>) -> Self {
        Formula::And(children)
    }

    pub fn or(children: Vec<Formula>) -> Self {
        Formula::Or(children)
    }

    pub fn until(lhs: Formula, rhs: Formula, interval: Interval) -> Self {
        Formula::Until { lhs: Box::new(lhs), rhs: Box::new(rhs), interval }
    }

    pub fn eventually(child: Formula, interval: Interval) -> Self {
        Formula::Eventually { child: Box::new(child), interval }
    }

    pub fn always(child: Formula, interval: Interval) -> Self {
        Formula::Always { child: Box::new(child), interval }
    }

    /// Number of future steps needed to evaluate the formula.
    pub fn length(&self) -> u32 {
        formula_length(self)
    }

    pub fn is_temporal(&self) -> bool {
        matches!(self, Formula::Until { .. } | Formula::Eventually { .. } | Formula::Always { .. })
    }

    /// True when the formula contains no temporal operator.
    pub fn is_state_formula(&self) -> bool {
        match self {
            Formula::Predicate(_) => true,
            Formula::And(cs) | Formula::Or(cs) => cs.iter().all(Formula::is_state_formula),
            _ => false,
        }
    }

    /// Number of temporal operators in the formula.
    pub fn temporal_count(&self) -> usize {
        match self {
            Formula::Predicate(_) => 0,
            Formula::And(cs) | Formula::Or(cs) => cs.iter().map(Formula::temporal_count).sum(),
            Formula::Until { lhs, rhs, .. } => 1 + lhs.temporal_count() + rhs.temporal_count(),
            Formula::Eventually { child, .. } | Formula::Always { child, .. } => 1 + child.temporal_count(),
        }
    }

    pub fn max_predicate_index(&self) -> Option<usize> {
        match self {
            Formula::Predicate(l) => Some(l.index),
            Formula::And(cs) | Formula::Or(cs) => cs.iter().filter_map(Formula::max_predicate_index).max(),
            Formula::Until { lhs, rhs, .. } => lhs.max_predicate_index().max(rhs.max_predicate_index()),
            Formula::Eventually { child, .. } | Formula::Always { child, .. } => child.max_predicate_index(),
        }
    }

    /// Checks that every predicate index is a row of a map with `num_predicates` rows.
    pub fn validate(&self, num_predicates: usize) -> Result<(), FormulaError> {
        match self.max_predicate_index() {
            Some(index) if index >= num_predicates => {
                Err(FormulaError::UnknownPredicate { index, available: num_predicates })
            }
            _ => Ok(()),
        }
    }
}

pub fn formula_length(f: &Formula) -> u32 {
    match f {
        Formula::Predicate(_) => 0,
        Formula::And(cs) | Formula::Or(cs) => cs.iter().map(formula_length).max().unwrap_or(0),
        Formula::Until { lhs, rhs, interval } => interval.hi + formula_length(lhs).max(formula_length(rhs)),
        Formula::Eventually { child, interval } | Formula::Always { child, interval } => {
            interval.hi + formula_length(child)
        }
    }
}

/// Binding strength used by the printer: operands of `&`, `|` and of temporal
/// operators are wrapped in parentheses when they bind looser than the position allows.
fn needs_parens_in_and(f: &Formula) -> bool {
    matches!(f, Formula::And(_) | Formula::Or(_))
}

fn needs_parens_in_or(f: &Formula) -> bool {
    matches!(f, Formula::Or(_))
}

fn needs_parens_as_unary(f: &Formula) -> bool {
    matches!(f, Formula::And(_) | Formula::Or(_))
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, inner: &Formula, wrap: bool) -> fmt::Result {
    if wrap {
        write!(f, "({inner})")
    } else {
        write!(f, "{inner}")
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Predicate(l) => write!(f, "{l}"),
            Formula::And(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" & ")?;
                    }
                    write_wrapped(f, c, needs_parens_in_and(c))?;
                }
                Ok(())
            }
            Formula::Or(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" | ")?;
                    }
                    write_wrapped(f, c, needs_parens_in_or(c))?;
                }
                Ok(())
            }
            Formula::Until { lhs, rhs, interval } => {
                write_wrapped(f, lhs, !matches!(**lhs, Formula::Predicate(_)))?;
                write!(f, " U{interval} ")?;
                write_wrapped(f, rhs, needs_parens_as_unary(rhs))
            }
            Formula::Eventually { child, interval } => {
                write!(f, "F{interval} ")?;
                write_wrapped(f, child, needs_parens_as_unary(child))
            }
            Formula::Always { child, interval } => {
                write!(f, "G{interval} ")?;
                write_wrapped(f, child, needs_parens_as_unary(child))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// The body is imposed at every step: `G[0,∞] body`.
    AllTime,
    /// `event ⟹ body`, with the event raised at step `trigger`.
    OneTime { trigger: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Specification {
    pub mode: Mode,
    pub body: Formula,
}

impl Specification {
    pub fn all_time(body: Formula) -> Self {
        Specification { mode: Mode::AllTime, body }
    }

    pub fn one_time(body: Formula, trigger: u32) -> Self {
        Specification { mode: Mode::OneTime { trigger }, body }
    }

    pub fn length(&self) -> u32 {
        self.body.length()
    }
}

impl fmt::Display for Specification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            Mode::AllTime => write!(f, "{}", self.body),
            Mode::OneTime { trigger } => write!(f, "event@{trigger} => {}", self.body),
        }
    }
}

/// Which encoding path a specification body takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FragmentClass {
    /// Until over state formulas.
    Until,
    /// Eventually over a state formula.
    Eventually,
    /// Always over a state formula.
    Always,
    /// Conjunction of temporal operators.
    Conjunction,
    /// Disjunction of temporal operators.
    Disjunction,
    /// Nested mix of conjunctions and disjunctions of temporal operators.
    Mixed,
    Unsupported,
}

impl FragmentClass {
    /// Index `i` of the fragment family `ψᵢ`, or `None` when unsupported.
    pub fn family(&self) -> Option<u8> {
        match self {
            FragmentClass::Until => Some(1),
            FragmentClass::Eventually => Some(2),
            FragmentClass::Always => Some(3),
            FragmentClass::Conjunction => Some(4),
            FragmentClass::Disjunction => Some(5),
            FragmentClass::Mixed => Some(6),
            FragmentClass::Unsupported => None,
        }
    }
}

/// A temporal operator whose operands are all state formulas.
pub fn is_temporal_atom(f: &Formula) -> bool {
    match f {
        Formula::Until { lhs, rhs, .. } => lhs.is_state_formula() && rhs.is_state_formula(),
        Formula::Eventually { child, .. } | Formula::Always { child, .. } => child.is_state_formula(),
        _ => false,
    }
}

pub fn classify(spec: &Specification) -> FragmentClass {
    classify_formula(&spec.body)
}

pub fn classify_formula(f: &Formula) -> FragmentClass {
    match f {
        Formula::Until { .. } if is_temporal_atom(f) => FragmentClass::Until,
        Formula::Eventually { .. } if is_temporal_atom(f) => FragmentClass::Eventually,
        Formula::Always { .. } if is_temporal_atom(f) => FragmentClass::Always,
        Formula::And(_) | Formula::Or(_) => {
            let mut ops = (false, false);
            if !boolean_over_atoms(f, &mut ops) {
                return FragmentClass::Unsupported;
            }
            match ops {
                (true, false) => FragmentClass::Conjunction,
                (false, true) => FragmentClass::Disjunction,
                _ => FragmentClass::Mixed,
            }
        }
        _ => FragmentClass::Unsupported,
    }
}

fn boolean_over_atoms(f: &Formula, ops: &mut (bool, bool)) -> bool {
    match f {
        Formula::And(cs) | Formula::Or(cs) => {
            if matches!(f, Formula::And(_)) {
                ops.0 = true;
            } else {
                ops.1 = true;
            }
            !cs.is_empty() && cs.iter().all(|c| boolean_over_atoms(c, ops))
        }
        _ => is_temporal_atom(f),
    }
}

/// Affine map `z = C·x + c` from states to predicate values.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateMap {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
    labels: Vec<String>,
}

impl PredicateMap {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>, labels: Vec<String>) -> Result<Self, FormulaError> {
        if matrix.nrows() == 0 {
            return Err(FormulaError::PredicateMap("at least one predicate is required".into()));
        }
        if matrix.nrows() != offset.len() {
            return Err(FormulaError::PredicateMap(format!(
                "C has {} rows but c has {} entries",
                matrix.nrows(),
                offset.len()
            )));
        }
        if !labels.is_empty() && labels.len() != matrix.nrows() {
            return Err(FormulaError::PredicateMap(format!(
                "{} labels for {} predicates",
                labels.len(),
                matrix.nrows()
            )));
        }
        if matrix.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(FormulaError::PredicateMap("non-finite coefficient".into()));
        }
        let labels = if labels.is_empty() {
            (1..=matrix.nrows()).map(|i| format!("p{i}")).collect()
        } else {
            labels
        };
        Ok(PredicateMap { matrix, offset, labels })
    }

    /// Builds a map from row-major rows of `C` and entries of `c`.
    pub fn from_rows(rows: &[Vec<f64>], offset: &[f64]) -> Result<Self, FormulaError> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(FormulaError::PredicateMap("ragged C rows".into()));
        }
        let matrix = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        PredicateMap::new(matrix, DVector::from_column_slice(offset), Vec::new())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, FormulaError> {
        if labels.len() != self.len() {
            return Err(FormulaError::PredicateMap("label count".into()));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: u32, b: u32) -> Interval {
        Interval::new(a, b).unwrap()
    }

    #[test]
    fn length_of_predicate_is_zero() {
        assert_eq!(Formula::pred(0).length(), 0);
        assert_eq!(Formula::not_pred(0).length(), 0);
    }

    #[test]
    fn length_of_eventually_is_upper_bound() {
        assert_eq!(Formula::eventually(Formula::pred(0), iv(5, 25)).length(), 25);
    }

    #[test]
    fn length_of_until_adds_operand_lengths() {
        let f = Formula::until(Formula::pred(0), Formula::eventually(Formula::pred(1), iv(0, 3)), iv(2, 4));
        assert_eq!(f.length(), 7);
    }

    #[test]
    fn length_of_boolean_is_max() {
        let f = Formula::and(vec![
            Formula::always(Formula::pred(0), iv(0, 2)),
            Formula::eventually(Formula::pred(1), iv(1, 6)),
        ]);
        assert_eq!(f.length(), 6);
    }

    #[test]
    fn empty_interval_rejected() {
        assert_eq!(Interval::new(3, 2), Err(FormulaError::EmptyInterval { lo: 3, hi: 2 }));
    }

    #[test]
    fn classify_examples() {
        let g = Formula::always(Formula::pred(0), iv(0, 25));
        let f = Formula::eventually(Formula::pred(1), iv(5, 25));
        let u = Formula::until(Formula::pred(0), Formula::pred(1), iv(0, 2));
        assert_eq!(classify_formula(&g), FragmentClass::Always);
        assert_eq!(classify_formula(&f), FragmentClass::Eventually);
        assert_eq!(classify_formula(&u), FragmentClass::Until);
        assert_eq!(classify_formula(&Formula::and(vec![f.clone(), g.clone()])), FragmentClass::Conjunction);
        assert_eq!(classify_formula(&Formula::or(vec![f.clone(), g.clone()])), FragmentClass::Disjunction);
        assert_eq!(
            classify_formula(&Formula::or(vec![Formula::and(vec![f.clone(), g.clone()]), u.clone()])),
            FragmentClass::Mixed
        );
        let nested = Formula::eventually(Formula::always(Formula::pred(0), iv(0, 2)), iv(0, 5));
        assert_eq!(classify_formula(&nested), FragmentClass::Unsupported);
        assert_eq!(classify_formula(&Formula::pred(0)), FragmentClass::Unsupported);
        assert_eq!(
            classify_formula(&Formula::and(vec![Formula::pred(0), g])),
            FragmentClass::Unsupported
        );
    }

    #[test]
    fn classify_accepts_state_formula_operands() {
        let box_ = Formula::and(vec![Formula::pred(0), Formula::pred(1), Formula::not_pred(2)]);
        assert_eq!(classify_formula(&Formula::eventually(box_, iv(5, 25))), FragmentClass::Eventually);
    }

    #[test]
    fn validate_catches_unknown_predicate() {
        let f = Formula::eventually(Formula::pred(3), iv(0, 1));
        assert!(f.validate(4).is_ok());
        assert_eq!(f.validate(3), Err(FormulaError::UnknownPredicate { index: 3, available: 3 }));
    }

    #[test]
    fn predicate_map_dimension_checks() {
        assert!(PredicateMap::from_rows(&[vec![1.0, 0.0]], &[0.0, 1.0]).is_err());
        assert!(PredicateMap::from_rows(&[], &[]).is_err());
        let pm = PredicateMap::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]).unwrap();
        assert_eq!(pm.labels(), &["p1".to_string(), "p2".to_string()]);
        assert_eq!(pm.state_dim(), 2);
    }

    #[test]
    fn display_forms() {
        let f = Formula::until(Formula::pred(0), Formula::not_pred(1), iv(2, 4));
        assert_eq!(f.to_string(), "p1 U[2,4] !p2");
        let g = Formula::eventually(Formula::and(vec![Formula::pred(0), Formula::pred(1)]), iv(5, 25));
        assert_eq!(g.to_string(), "F[5,25] (p1 & p2)");
        let spec = Specification::one_time(g, 3);
        assert_eq!(spec.to_string(), "event@3 => F[5,25] (p1 & p2)");
    }
}
