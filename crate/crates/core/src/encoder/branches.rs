//! Splits a specification body into conjunctive branches of temporal operators whose
//! operands are conjunctions of literals.

use std::fmt;

use super::EncodeError;
use crate::formula::{Formula, Interval, Literal};
use crate::robustness::TemporalKind;

/// Upper bound on the number of branches a body may expand into.
pub const MAX_BRANCHES: usize = 4096;

/// A conjunction of literals; its robustness is the minimum over the literals.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Conjunct(pub Vec<Literal>);

impl Conjunct {
    pub fn literals(&self) -> &[Literal] {
        &self.0
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.0.iter().map(|l| l.value(z)).fold(f64::INFINITY, f64::min)
    }

    pub fn to_formula(&self) -> Formula {
        if self.0.len() == 1 {
            Formula::Predicate(self.0[0])
        } else {
            Formula::And(self.0.iter().map(|l| Formula::Predicate(*l)).collect())
        }
    }
}

/// One temporal operator of a branch. `channels` holds `[lhs, rhs]` for until and
/// `[operand]` otherwise. `node` is the operator's pre-order index in the original body.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub node: usize,
    pub kind: TemporalKind,
    pub interval: Interval,
    pub channels: Vec<Conjunct>,
}

impl Member {
    pub fn to_formula(&self) -> Formula {
        match self.kind {
            TemporalKind::Until => {
                Formula::until(self.channels[0].to_formula(), self.channels[1].to_formula(), self.interval)
            }
            TemporalKind::Eventually => Formula::eventually(self.channels[0].to_formula(), self.interval),
            TemporalKind::Always => Formula::always(self.channels[0].to_formula(), self.interval),
        }
    }

    pub fn length(&self) -> u32 {
        self.interval.hi()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub members: Vec<Member>,
}

impl Branch {
    pub fn to_formula(&self) -> Formula {
        if self.members.len() == 1 {
            self.members[0].to_formula()
        } else {
            Formula::And(self.members.iter().map(Member::to_formula).collect())
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_formula())
    }
}

/// Disjunctive normal form of `body` over temporal operators.
///
/// Disjunctions inside an operand are resolved by picking one disjunct per branch, which
/// is sufficient for satisfaction of the original operand.
pub fn compile_branches(body: &Formula) -> Result<Vec<Branch>, EncodeError> {
    let alts = temporal_dnf(body, 0)?;
    Ok(alts.into_iter().map(|members| Branch { members }).collect())
}

fn product<T: Clone>(parts: Vec<Vec<Vec<T>>>) -> Result<Vec<Vec<T>>, EncodeError> {
    let mut acc: Vec<Vec<T>> = vec![Vec::new()];
    for alts in parts {
        if acc.len().saturating_mul(alts.len()) > MAX_BRANCHES {
            return Err(EncodeError::TooManyBranches(MAX_BRANCHES));
        }
        let mut next = Vec::with_capacity(acc.len() * alts.len());
        for prefix in &acc {
            for alt in &alts {
                let mut v = prefix.clone();
                v.extend(alt.iter().cloned());
                next.push(v);
            }
        }
        acc = next;
    }
    Ok(acc)
}

fn temporal_dnf(f: &Formula, node: usize) -> Result<Vec<Vec<Member>>, EncodeError> {
    match f {
        Formula::And(cs) | Formula::Or(cs) => {
            let mut id = node;
            let mut parts = Vec::with_capacity(cs.len());
            for c in cs {
                parts.push(temporal_dnf(c, id)?);
                id += c.temporal_count();
            }
            if matches!(f, Formula::And(_)) {
                product(parts)
            } else {
                let out: Vec<Vec<Member>> = parts.into_iter().flatten().collect();
                if out.len() > MAX_BRANCHES {
                    return Err(EncodeError::TooManyBranches(MAX_BRANCHES));
                }
                Ok(out)
            }
        }
        Formula::Until { lhs, rhs, interval } => {
            let lhs = state_dnf(lhs)?;
            let rhs = state_dnf(rhs)?;
            let mut out = Vec::new();
            for l in &lhs {
                for r in &rhs {
                    out.push(vec![Member {
                        node,
                        kind: TemporalKind::Until,
                        interval: *interval,
                        channels: vec![l.clone(), r.clone()],
                    }]);
                }
            }
            if out.len() > MAX_BRANCHES {
                return Err(EncodeError::TooManyBranches(MAX_BRANCHES));
            }
            Ok(out)
        }
        Formula::Eventually { child, interval } | Formula::Always { child, interval } => {
            let kind =
                if matches!(f, Formula::Eventually { .. }) { TemporalKind::Eventually } else { TemporalKind::Always };
            Ok(state_dnf(child)?
                .into_iter()
                .map(|c| vec![Member { node, kind, interval: *interval, channels: vec![c] }])
                .collect())
        }
        Formula::Predicate(_) => Err(EncodeError::Unsupported(format!(
            "predicate {f} appears outside a temporal operator"
        ))),
    }
}

fn state_dnf(f: &Formula) -> Result<Vec<Conjunct>, EncodeError> {
    match f {
        Formula::Predicate(l) => Ok(vec![Conjunct(vec![*l])]),
        Formula::And(cs) => {
            let parts = cs
                .iter()
                .map(|c| state_dnf(c).map(|alts| alts.into_iter().map(|a| a.0).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(product(parts)?
                .into_iter()
                .map(|mut lits| {
                    let mut seen = std::collections::HashSet::new();
                    lits.retain(|l| seen.insert(*l));
                    Conjunct(lits)
                })
                .collect())
        }
        Formula::Or(cs) => {
            let mut out = Vec::new();
            for c in cs {
                out.extend(state_dnf(c)?);
            }
            if out.len() > MAX_BRANCHES {
                return Err(EncodeError::TooManyBranches(MAX_BRANCHES));
            }
            Ok(out)
        }
        _ => Err(EncodeError::Unsupported(format!("temporal operator {f} nested inside a temporal operator"))),
    }
}
