//! Linear programs whose optimum maximizes the simplified average robustness of a
//! specification branch over a prediction window.
//!
//! Decision vector layout: `[u_x | u(k0) … u(k0+N-1) | w | ξ]`.
//! - `u_x` (one per evaluation row) are epigraph variables for conjunctions of temporal
//!   operators; absent when the branch has a single operator.
//! - `w` are epigraph variables for conjunctions of literals used as operands, one per
//!   (conjunct, future step) that carries cost weight.
//! - `ξ` is the optional shared slack on the hard satisfaction rows.

mod branches;
mod matrices;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use log::warn;
use nalgebra::DVector;
use thiserror::Error;

pub use branches::{compile_branches, Branch, Conjunct, Member, MAX_BRANCHES};
pub use matrices::{
    build_e_always, build_e_eventually, build_e_until, build_h2man, build_qr, build_stacked, k1_schedule,
    matrix_to_csv, pad_for_conjunction, select_one_time_row, EMatrix, StackedModel, Window,
};

use crate::formula::Literal;
use crate::lpsolver::{LpError, LpProblem};
use crate::robustness::{K1Policy, RobustnessError, Signal, TemporalKind};
use crate::system::LtiSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("unsupported specification: {0}")]
    Unsupported(String),
    #[error("horizon N = {horizon} is shorter than the formula length h = {length}")]
    HorizonTooShort { horizon: usize, length: u32 },
    #[error("window: {0}")]
    Window(String),
    #[error("k1 = {k1} for evaluation step {k} lies outside [{lo}, {hi}]")]
    K1OutOfRange { k: i64, k1: i64, lo: i64, hi: i64 },
    #[error(transparent)]
    K1(#[from] RobustnessError),
    #[error("predicate values for step {step} are needed but the recorded past starts at {available}")]
    PastTooShort { step: i64, available: i64 },
    #[error("one-time window elapsed: k_event = {k_event} with formula length {length}")]
    OneTimeElapsed { k_event: u32, length: u32 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("formula expands into more than {0} branches")]
    TooManyBranches(usize),
    #[error(transparent)]
    Lp(#[from] LpError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Softening {
    Off,
    /// Penalty `10^6` times the largest absolute cost coefficient.
    Auto,
    Penalty(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub softening: Softening,
    /// Hard rows on predicted values require `z >= margin` instead of `z >= 0`, so that a
    /// vertex solution on the boundary still satisfies the formula after rounding.
    pub margin: f64,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { softening: Softening::Off, margin: 1e-6 }
    }
}

/// Which evaluation rows enter the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Every row `k' ∈ [k_low, k_high]`.
    AllTime,
    /// Only the row of the event activation, `k_event` steps before `k0`.
    OneTime { k_event: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberEncoding {
    pub member: Member,
    /// Rows kept by the activation, widened to the common column width.
    pub e: EMatrix,
    pub eval_steps: Vec<i64>,
    /// Witness step per kept row; `None` for always.
    pub k1: Vec<Option<i64>>,
}

impl MemberEncoding {
    /// `(literal, step)` pairs that must be nonnegative.
    pub fn requirements(&self) -> Vec<(Literal, i64)> {
        let mut out = Vec::new();
        for (row, &kp) in self.eval_steps.iter().enumerate() {
            let push = |out: &mut Vec<(Literal, i64)>, c: &Conjunct, t: i64| {
                out.extend(c.literals().iter().map(|l| (*l, t)));
            };
            match self.member.kind {
                TemporalKind::Until => {
                    let k1 = self.k1[row].expect("until rows carry k1");
                    for t in kp..=k1 {
                        push(&mut out, &self.member.channels[0], t);
                    }
                    push(&mut out, &self.member.channels[1], k1);
                }
                TemporalKind::Eventually => {
                    push(&mut out, &self.member.channels[0], self.k1[row].expect("eventually rows carry k1"))
                }
                TemporalKind::Always => {
                    let iv = self.member.interval;
                    for t in (kp + iv.lo() as i64)..=(kp + iv.hi() as i64) {
                        push(&mut out, &self.member.channels[0], t);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub u_x: Range<usize>,
    pub inputs: Range<usize>,
    pub aux: Range<usize>,
    pub slack: Option<usize>,
    pub input_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RowCounts {
    /// `u_x` bounded by each member's contribution.
    pub epigraph: usize,
    /// `w` bounded by each literal of its conjunct.
    pub auxiliary: usize,
    /// Nonnegativity of required literals, one per distinct `(literal, step)`.
    pub hard: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedProgram {
    pub lp: LpProblem,
    pub layout: Layout,
    pub window: Window,
    pub activation: Activation,
    pub members: Vec<MemberEncoding>,
    /// Constant part of the robustness sum not carried by the LP cost.
    pub cost_offset: f64,
    pub penalty: Option<f64>,
    pub rows: RowCounts,
    pub var_names: Vec<String>,
    /// Largest violation among required literals at already recorded steps (0 if none).
    pub past_violation: f64,
}

/// Everything the assembly needs besides the branch itself.
#[derive(Clone, Copy)]
pub struct AssemblyContext<'a> {
    pub stacked: &'a StackedModel,
    pub system: &'a LtiSystem,
    pub x0: &'a DVector<f64>,
    /// Recorded predicate values up to and including `k0`.
    pub past: &'a Signal,
    pub k0: i64,
    pub activation: Activation,
    pub policy: &'a dyn K1Policy,
    pub options: EncodeOptions,
}

/// Sparse affine expression over decision variables.
#[derive(Debug, Clone, Default)]
struct Affine {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Affine {
    fn add_scaled(&mut self, other: &Affine, s: f64) {
        self.terms.extend(other.terms.iter().map(|(i, v)| (*i, v * s)));
        self.constant += other.constant * s;
    }

    fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, v) in &self.terms {
            out[*i] += v;
        }
        out
    }
}

struct Builder<'a> {
    ctx: AssemblyContext<'a>,
    window: Window,
    free: DVector<f64>,
    inputs_start: usize,
}

impl Builder<'_> {
    fn past_value(&self, t: i64) -> Result<&[f64], EncodeError> {
        self.ctx.past.get(t).ok_or(EncodeError::PastTooShort { step: t, available: self.ctx.past.start() })
    }

    fn literal_expr(&self, l: Literal, t: i64) -> Result<Affine, EncodeError> {
        if t <= self.window.k0 {
            return Ok(Affine { terms: Vec::new(), constant: l.value(self.past_value(t)?) });
        }
        let st = self.ctx.stacked;
        let s = (t - self.window.k0 - 1) as usize;
        let row = s * st.predicates + l.index;
        let sign = l.sign();
        let terms = (0..(s + 1) * st.inputs)
            .filter_map(|col| {
                let v = st.h2[(row, col)];
                (v != 0.0).then_some((self.inputs_start + col, sign * v))
            })
            .collect();
        Ok(Affine { terms, constant: sign * self.free[row] })
    }
}

/// Builds the program for one branch over the window ending at `k0 + N`.
pub fn assemble(branch: &Branch, ctx: AssemblyContext<'_>) -> Result<EncodedProgram, EncodeError> {
    let st = ctx.stacked;
    let n = st.horizon;
    let m = st.inputs;
    if ctx.system.input_dim() != m || ctx.x0.len() != st.h1.ncols() {
        return Err(EncodeError::Dimension("system, stacked model and state disagree".into()));
    }
    if branch.members.is_empty() {
        return Err(EncodeError::Unsupported("empty branch".into()));
    }
    for member in &branch.members {
        for c in &member.channels {
            if let Some(l) = c.literals().iter().find(|l| l.index >= st.predicates) {
                return Err(EncodeError::Dimension(format!("literal {l} but only {} predicates", st.predicates)));
            }
        }
    }
    let h = branch.members.iter().map(Member::length).max().unwrap_or(0);
    let window = Window::new(ctx.k0, h, n)?;

    // E matrices and witness steps for the kept rows.
    let mut members = Vec::with_capacity(branch.members.len());
    for member in &branch.members {
        let (e, k1) = match member.kind {
            TemporalKind::Always => (build_e_always(&window, member.interval)?, vec![None; window.rows()]),
            kind => {
                let k1 = k1_schedule(&window, member.node, kind, member.interval, ctx.policy)?;
                let e = if kind == TemporalKind::Until {
                    build_e_until(&window, member.interval, &k1)?
                } else {
                    build_e_eventually(&window, member.interval, &k1)?
                };
                (e, k1.into_iter().map(Some).collect())
            }
        };
        let steps: Vec<i64> = window.eval_steps().collect();
        let (e, eval_steps, k1) = match ctx.activation {
            Activation::AllTime => (e, steps, k1),
            Activation::OneTime { k_event } => {
                let row = (h as usize).checked_sub(k_event as usize + 1);
                let e = select_one_time_row(&e, h, k_event)?;
                let row = row.expect("checked by select_one_time_row");
                (e, vec![steps[row]], vec![k1[row]])
            }
        };
        members.push(MemberEncoding { member: member.clone(), e, eval_steps, k1 });
    }
    let blocks = members.iter().map(|me| me.e.blocks()).max().unwrap_or(0);
    for me in &mut members {
        me.e = me.e.widened(blocks);
    }
    let rows = members[0].e.rows();
    let joint = members.len() > 1;

    let mut var_names = Vec::new();
    let u_x = 0..if joint { rows } else { 0 };
    for i in u_x.clone() {
        var_names.push(format!("ux[{}]", members[0].eval_steps[i]));
    }
    let inputs = u_x.end..u_x.end + m * n;
    for j in 0..n {
        for c in 0..m {
            var_names.push(format!("u[{}][{}]", ctx.k0 + j as i64, c + 1));
        }
    }

    let builder = Builder { ctx, window, free: st.free_response(ctx.x0), inputs_start: inputs.start };

    // Channel expressions; multi-literal conjuncts at future steps get an aux variable.
    let mut aux_index: HashMap<(Conjunct, i64), usize> = HashMap::new();
    let mut aux_order: Vec<(Conjunct, i64)> = Vec::new();
    let mut contributions: Vec<Vec<Affine>> = Vec::with_capacity(members.len());
    for me in &members {
        let mut per_row = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut expr = Affine::default();
            for (block, c, weight) in me.e.row_entries(i) {
                let t = window.step_of_block(block);
                let conj = &me.member.channels[c];
                if t <= window.k0 {
                    expr.constant += weight * conj.value(builder.past_value(t)?);
                } else if conj.literals().len() == 1 {
                    expr.add_scaled(&builder.literal_expr(conj.literals()[0], t)?, weight);
                } else {
                    let key = (conj.clone(), t);
                    let next = inputs.end + aux_order.len();
                    let var = *aux_index.entry(key.clone()).or_insert_with(|| {
                        aux_order.push(key);
                        next
                    });
                    expr.terms.push((var, weight));
                }
            }
            per_row.push(expr);
        }
        contributions.push(per_row);
    }
    let aux = inputs.end..inputs.end + aux_order.len();
    for (conj, t) in &aux_order {
        let lits: Vec<String> = conj.literals().iter().map(Literal::to_string).collect();
        var_names.push(format!("w[{}@{t}]", lits.join("&")));
    }
    let mut nvars = aux.end;

    let mut lp = LpProblem::new(nvars);
    for i in u_x.clone().chain(aux.clone()) {
        lp.set_bounds(i, f64::NEG_INFINITY, f64::INFINITY);
    }
    for j in 0..n {
        for c in 0..m {
            lp.set_bounds(inputs.start + j * m + c, ctx.system.input_lower()[c], ctx.system.input_upper()[c]);
        }
    }

    let mut cost_offset = 0.0;
    let mut counts = RowCounts::default();
    if joint {
        for i in 0..rows {
            lp.set_cost_coefficient(u_x.start + i, 1.0);
            for per_row in &contributions {
                // u_x,i - contribution <= constant part
                let mut coeffs = per_row[i].dense(nvars);
                coeffs.iter_mut().for_each(|v| *v = -*v);
                coeffs[u_x.start + i] += 1.0;
                lp.add_row(coeffs, per_row[i].constant)?;
                counts.epigraph += 1;
            }
        }
    } else {
        let mut cost = vec![0.0; nvars];
        for expr in &contributions[0] {
            for (i, v) in &expr.terms {
                cost[*i] += v;
            }
            cost_offset += expr.constant;
        }
        lp.set_cost(cost)?;
    }

    for (idx, (conj, t)) in aux_order.iter().enumerate() {
        for &l in conj.literals() {
            let expr = builder.literal_expr(l, *t)?;
            let mut coeffs = expr.dense(nvars);
            coeffs.iter_mut().for_each(|v| *v = -*v);
            coeffs[aux.start + idx] += 1.0;
            lp.add_row(coeffs, expr.constant)?;
            counts.auxiliary += 1;
        }
    }

    let required: BTreeSet<(i64, Literal)> =
        members.iter().flat_map(|me| me.requirements()).map(|(l, t)| (t, l)).collect();
    let penalty = match ctx.options.softening {
        Softening::Off => None,
        Softening::Auto => {
            let scale = lp.cost().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            Some(1e6 * if scale > 0.0 { scale } else { 1.0 })
        }
        Softening::Penalty(pm) => {
            if !(pm.is_finite() && pm >= 0.0) {
                return Err(EncodeError::Window(format!("slack penalty must be finite and nonnegative, got {pm}")));
            }
            if pm == 0.0 {
                warn!("slack penalty M = 0 leaves the satisfaction rows unenforced");
            }
            Some(pm)
        }
    };
    let slack = penalty.map(|pm| {
        let idx = lp.add_var(-pm, 0.0, f64::INFINITY);
        var_names.push("xi".to_string());
        idx
    });
    nvars = lp.num_vars();
    let mut past_violation = 0.0f64;
    for &(t, l) in &required {
        // -lit - ξ <= const - margin
        let expr = builder.literal_expr(l, t)?;
        let mut coeffs = expr.dense(nvars);
        coeffs.iter_mut().for_each(|v| *v = -*v);
        let future = t > window.k0;
        if !future {
            past_violation = past_violation.max(-expr.constant);
        }
        if let Some(xi) = slack {
            coeffs[xi] = -1.0;
        }
        let margin = if future { ctx.options.margin } else { 0.0 };
        lp.add_row(coeffs, expr.constant - margin)?;
        counts.hard += 1;
    }

    Ok(EncodedProgram {
        lp,
        layout: Layout { u_x, inputs, aux, slack, input_dim: m },
        window,
        activation: ctx.activation,
        members,
        cost_offset,
        penalty,
        rows: counts,
        var_names,
        past_violation,
    })
}

impl EncodedProgram {
    /// Input sequence `u(k0) … u(k0+N-1)` read from a decision vector.
    pub fn inputs(&self, x: &[f64]) -> Vec<Vec<f64>> {
        x[self.layout.inputs.clone()].chunks(self.layout.input_dim).map(<[f64]>::to_vec).collect()
    }

    pub fn first_input(&self, x: &[f64]) -> Vec<f64> {
        x[self.layout.inputs.start..self.layout.inputs.start + self.layout.input_dim].to_vec()
    }

    pub fn slack(&self, x: &[f64]) -> f64 {
        self.layout.slack.map_or(0.0, |i| x[i])
    }

    /// The robustness sum at `x`, excluding the slack penalty. Exact at an optimum, where
    /// every epigraph variable meets its bound.
    pub fn robustness_sum(&self, x: &[f64]) -> f64 {
        let raw = self.lp.objective_at(x) + self.cost_offset;
        match (self.layout.slack, self.penalty) {
            (Some(i), Some(pm)) => raw + pm * x[i],
            _ => raw,
        }
    }

    /// `Σ_rows min_members (E_member · channels)` evaluated on a signal that covers
    /// `[k_low, k0 + N]`.
    pub fn cost_on_signal(&self, s: &Signal) -> Result<f64, EncodeError> {
        let rows = self.members[0].e.rows();
        let mut total = 0.0;
        for i in 0..rows {
            let mut best = f64::INFINITY;
            for me in &self.members {
                let mut v = 0.0;
                for (block, c, weight) in me.e.row_entries(i) {
                    let t = self.window.step_of_block(block);
                    let z = s.get(t).ok_or(EncodeError::PastTooShort { step: t, available: s.start() })?;
                    v += weight * me.member.channels[c].value(z);
                }
                best = best.min(v);
            }
            total += best;
        }
        Ok(total)
    }

    /// Distinct `(step, literal)` pairs constrained to be nonnegative.
    pub fn requirements(&self) -> BTreeSet<(i64, Literal)> {
        self.members.iter().flat_map(|me| me.requirements()).map(|(l, t)| (t, l)).collect()
    }

    /// Epigraph matrices over the interleaved channels of all members, for inspection.
    pub fn qr(&self) -> Result<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>), EncodeError> {
        let count = self.members.len();
        let padded = self
            .members
            .iter()
            .enumerate()
            .map(|(j, me)| pad_for_conjunction(&me.e, j, count))
            .collect::<Result<Vec<_>, _>>()?;
        build_qr(&padded, self.layout.inputs.len())
    }

    /// Plain-text dump: the LP followed by a short summary of the row groups.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# window k0={} h={} N={}", self.window.k0, self.window.h, self.window.horizon);
        let _ = writeln!(
            out,
            "# rows: epigraph={} auxiliary={} hard={}",
            self.rows.epigraph, self.rows.auxiliary, self.rows.hard
        );
        if let Some(pm) = self.penalty {
            let _ = writeln!(out, "# slack penalty M={pm:?}");
        }
        let _ = writeln!(out, "# cost offset {:?}", self.cost_offset);
        out.push_str(&self.lp.to_text_with_names(Some(&self.var_names)));
        out
    }
}
