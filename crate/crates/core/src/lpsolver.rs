//! Dense bounded-variable primal simplex.
//!
//! Problems are stated as `maximize c·x` subject to rows `a·x ≤ b` and per-variable
//! bounds `l ≤ x ≤ u`, where either bound may be infinite. The solver is a two-phase
//! tableau method: phase one drives artificial variables out of rows whose slack starts
//! negative, phase two optimizes the real cost. Pivoting uses the largest reduced cost
//! and falls back to Bland's rule after a run of degenerate pivots, so the sequence of
//! pivots is a pure function of the input.
//!
//! The basis is re-inverted from the original columns periodically and before a result
//! is returned, and the returned point is checked against the original rows. A point
//! that fails that check is reported as [`LpError::Numerical`], never as an optimum.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite coefficient in {0}")]
    NonFinite(String),
    #[error("variable {index} has lower bound {lower} above upper bound {upper}")]
    InvertedBounds { index: usize, lower: f64, upper: f64 },
    #[error("numerical breakdown after {iterations} iterations: {detail}")]
    Numerical { iterations: usize, detail: String },
    #[error("iteration limit of {0} reached")]
    IterationLimit(usize),
    #[error("malformed LP text at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

impl fmt::Display for LpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
        };
        f.write_str(s)
    }
}

/// A linear program `maximize cost·x` s.t. `rows·x ≤ rhs`, `lower ≤ x ≤ upper`.
///
/// New variables default to `0 ≤ x < ∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    cost: Vec<f64>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl LpProblem {
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            cost: vec![0.0; num_vars],
            rows: Vec::new(),
            rhs: Vec::new(),
            lower: vec![0.0; num_vars],
            upper: vec![f64::INFINITY; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn set_cost(&mut self, cost: Vec<f64>) -> Result<(), LpError> {
        if cost.len() != self.num_vars() {
            return Err(LpError::Dimension(format!(
                "cost has {} entries, problem has {} variables",
                cost.len(),
                self.num_vars()
            )));
        }
        self.cost = cost;
        Ok(())
    }

    pub fn set_cost_coefficient(&mut self, var: usize, value: f64) {
        self.cost[var] = value;
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, rhs: f64) -> Result<usize, LpError> {
        if coeffs.len() != self.num_vars() {
            return Err(LpError::Dimension(format!(
                "row has {} coefficients, problem has {} variables",
                coeffs.len(),
                self.num_vars()
            )));
        }
        self.rows.push(coeffs);
        self.rhs.push(rhs);
        Ok(self.rows.len() - 1)
    }

    /// Appends a variable with the given cost and bounds, extending every row with a
    /// zero coefficient. Returns its index.
    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        for row in &mut self.rows {
            row.push(0.0);
        }
        self.cost.len() - 1
    }

    pub fn set_row_coefficient(&mut self, row: usize, var: usize, value: f64) {
        self.rows[row][var] = value;
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Dimension("bound vectors".into()));
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(LpError::NonFinite("cost".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(LpError::Dimension(format!("row {i}")));
            }
            if row.iter().any(|a| !a.is_finite()) || !self.rhs[i].is_finite() {
                return Err(LpError::NonFinite(format!("row {i}")));
            }
        }
        for j in 0..n {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(LpError::NonFinite(format!("bounds of variable {j}")));
            }
            if l > u {
                return Err(LpError::InvertedBounds { index: j, lower: l, upper: u });
            }
        }
        Ok(())
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of any row or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (row, b) in self.rows.iter().zip(&self.rhs) {
            let lhs: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
            worst = worst.max(lhs - b);
        }
        for (j, v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        worst
    }

    /// Upper bound on the objective implied by nonnegative row multipliers `duals`
    /// (weak duality). `None` when the multipliers leave the bound infinite.
    pub fn dual_bound(&self, duals: &[f64]) -> Option<f64> {
        if duals.len() != self.num_rows() || duals.iter().any(|y| *y < 0.0) {
            return None;
        }
        let mut bound: f64 = self.rhs.iter().zip(duals).map(|(b, y)| b * y).sum();
        for j in 0..self.num_vars() {
            let reduced = self.cost[j]
                - self.rows.iter().zip(duals).map(|(row, y)| row[j] * y).sum::<f64>();
            let term = if reduced > 0.0 {
                reduced * self.upper[j]
            } else if reduced < 0.0 {
                reduced * self.lower[j]
            } else {
                0.0
            };
            if !term.is_finite() {
                return None;
            }
            bound += term;
        }
        Some(bound)
    }

    /// Serializes to the plain-text LP format read back by [`LpProblem::from_str`].
    ///
    /// ```text
    /// lp 1
    /// variables 2
    /// constraints 1
    /// maximize: 1 1
    /// bound 0: 0 inf
    /// bound 1: 0 inf
    /// row 0: 1 2 <= 4
    /// ```
    ///
    /// Numbers use the shortest representation that parses back to the same `f64`.
    /// Lines starting with `#` are comments.
    pub fn to_text(&self) -> String {
        self.to_text_with_names(None)
    }

    pub fn to_text_with_names(&self, names: Option<&[String]>) -> String {
        let mut out = String::new();
        writeln!(out, "lp 1").unwrap();
        writeln!(out, "variables {}", self.num_vars()).unwrap();
        writeln!(out, "constraints {}", self.num_rows()).unwrap();
        if let Some(names) = names {
            for (j, name) in names.iter().enumerate() {
                writeln!(out, "# var {j} {name}").unwrap();
            }
        }
        writeln!(out, "maximize: {}", join_numbers(&self.cost)).unwrap();
        for j in 0..self.num_vars() {
            writeln!(out, "bound {j}: {:?} {:?}", self.lower[j], self.upper[j]).unwrap();
        }
        for (i, row) in self.rows.iter().enumerate() {
            writeln!(out, "row {i}: {} <= {:?}", join_numbers(row), self.rhs[i]).unwrap();
        }
        out
    }
}

fn join_numbers(values: &[f64]) -> String {
    // `+ 0.0` turns a negative zero into a plain zero.
    values.iter().map(|v| format!("{:?}", v + 0.0)).collect::<Vec<_>>().join(" ")
}

impl FromStr for LpProblem {
    type Err = LpError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = |line: usize, message: &str| LpError::Parse { line, message: message.to_string() };
        let parse_nums = |line: usize, s: &str| -> Result<Vec<f64>, LpError> {
            s.split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|_| err(line, &format!("bad number `{tok}`"))))
                .collect()
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (ln, header) = lines.next().ok_or_else(|| err(0, "empty input"))?;
        if header != "lp 1" {
            return Err(err(ln, "expected `lp 1` header"));
        }
        let mut count = |key: &str| -> Result<usize, LpError> {
            let (ln, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            l.strip_prefix(key)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| err(ln, &format!("expected `{key} <count>`")))
        };
        let n = count("variables")?;
        let m = count("constraints")?;
        let mut problem = LpProblem::new(n);

        let (ln, l) = lines.next().ok_or_else(|| err(0, "missing cost"))?;
        let cost = l.strip_prefix("maximize:").ok_or_else(|| err(ln, "expected `maximize:`"))?;
        problem.set_cost(parse_nums(ln, cost)?).map_err(|_| err(ln, "cost length"))?;

        for j in 0..n {
            let (ln, l) = lines.next().ok_or_else(|| err(0, "missing bounds"))?;
            let rest = l
                .strip_prefix(&format!("bound {j}:"))
                .ok_or_else(|| err(ln, &format!("expected `bound {j}:`")))?;
            let b = parse_nums(ln, rest)?;
            if b.len() != 2 {
                return Err(err(ln, "bound needs lower and upper"));
            }
            problem.set_bounds(j, b[0], b[1]);
        }
        for i in 0..m {
            let (ln, l) = lines.next().ok_or_else(|| err(0, "missing rows"))?;
            let rest = l
                .strip_prefix(&format!("row {i}:"))
                .ok_or_else(|| err(ln, &format!("expected `row {i}:`")))?;
            let (lhs, rhs) = rest.split_once("<=").ok_or_else(|| err(ln, "expected `<=`"))?;
            let coeffs = parse_nums(ln, lhs)?;
            let rhs = rhs.trim().parse::<f64>().map_err(|_| err(ln, "bad right-hand side"))?;
            problem.add_row(coeffs, rhs).map_err(|_| err(ln, "row length"))?;
        }
        if let Some((ln, _)) = lines.next() {
            return Err(err(ln, "trailing content"));
        }
        Ok(problem)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimizer for `Optimal`, last iterate for `Unbounded`, empty for `Infeasible`.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Row multipliers at the optimum (empty unless `Optimal`).
    pub duals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Primal feasibility and reduced-cost tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule for the phase.
    pub degenerate_limit: usize,
    pub refactor_every: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: 200_000,
            degenerate_limit: 50,
            refactor_every: 100,
        }
    }
}

impl SolverOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        SolverOptions { tolerance, ..Default::default() }
    }
}

pub fn solve(problem: &LpProblem, options: &SolverOptions) -> Result<LpSolution, LpError> {
    problem.validate()?;
    let mut simplex = Simplex::new(problem, options);
    simplex.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseEnd {
    Optimal,
    Unbounded,
}

const PIVOT_TOL: f64 = 1e-9;

struct Simplex<'a> {
    problem: &'a LpProblem,
    opts: &'a SolverOptions,
    m: usize,
    n: usize,
    ncols: usize,
    /// Columns of `[A | I | -E_art]`, row-major `m × ncols`.
    original: Vec<f64>,
    /// `B⁻¹ · original`, row-major `m × ncols`.
    tableau: Vec<f64>,
    reduced: Vec<f64>,
    phase_cost: Vec<f64>,
    basis: Vec<usize>,
    value: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    state: Vec<VarState>,
    banned: Vec<bool>,
    iterations: usize,
    since_refactor: usize,
}

impl<'a> Simplex<'a> {
    fn new(problem: &'a LpProblem, opts: &'a SolverOptions) -> Self {
        let n = problem.num_vars();
        let m = problem.num_rows();
        let mut value = vec![0.0; n + m];
        let mut state = vec![VarState::Free; n + m];
        for j in 0..n {
            let (l, u) = (problem.lower[j], problem.upper[j]);
            if l.is_finite() {
                value[j] = l;
                state[j] = VarState::AtLower;
            } else if u.is_finite() {
                value[j] = u;
                state[j] = VarState::AtUpper;
            }
        }
        // Rows whose slack would start negative get an artificial variable.
        let residual: Vec<f64> = (0..m)
            .map(|i| problem.rhs[i] - dot(&problem.rows[i], &value[..n]))
            .collect();
        let art_rows: Vec<usize> = (0..m).filter(|&i| residual[i] < 0.0).collect();
        let ncols = n + m + art_rows.len();

        let mut original = vec![0.0; m * ncols];
        for i in 0..m {
            original[i * ncols..i * ncols + n].copy_from_slice(&problem.rows[i]);
            original[i * ncols + n + i] = 1.0;
        }
        let mut basis: Vec<usize> = (n..n + m).collect();
        let mut lower = problem.lower.clone();
        let mut upper = problem.upper.clone();
        lower.extend(std::iter::repeat_n(0.0, m + art_rows.len()));
        upper.extend(std::iter::repeat_n(f64::INFINITY, m + art_rows.len()));
        value.extend(std::iter::repeat_n(0.0, art_rows.len()));
        state.extend(std::iter::repeat_n(VarState::AtLower, art_rows.len()));
        for s in n..n + m {
            state[s] = VarState::Basic;
            value[s] = residual[s - n];
        }
        for (k, &i) in art_rows.iter().enumerate() {
            let col = n + m + k;
            original[i * ncols + col] = -1.0;
            basis[i] = col;
            state[col] = VarState::Basic;
            value[col] = -residual[i];
            state[n + i] = VarState::AtLower;
            value[n + i] = 0.0;
        }
        // Initial basis matrix is diagonal with ±1 entries.
        let mut tableau = original.clone();
        for &i in &art_rows {
            for v in &mut tableau[i * ncols..(i + 1) * ncols] {
                *v = -*v;
            }
        }
        let mut phase_cost = vec![0.0; ncols];
        for k in 0..art_rows.len() {
            phase_cost[n + m + k] = -1.0;
        }
        let mut s = Simplex {
            problem,
            opts,
            m,
            n,
            ncols,
            original,
            tableau,
            reduced: vec![0.0; ncols],
            phase_cost,
            basis,
            value,
            lower,
            upper,
            state,
            banned: vec![false; ncols],
            iterations: 0,
            since_refactor: 0,
        };
        s.recompute_reduced();
        s
    }

    fn num_artificial(&self) -> usize {
        self.ncols - self.n - self.m
    }

    fn run(&mut self) -> Result<LpSolution, LpError> {
        let tol = self.opts.tolerance;
        if self.num_artificial() > 0 {
            let end = self.optimize()?;
            debug_assert_eq!(end, PhaseEnd::Optimal);
            let infeasibility: f64 = (self.n + self.m..self.ncols).map(|j| self.value[j].max(0.0)).sum();
            let scale = 1.0 + self.problem.rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            if infeasibility > tol * 100.0 * scale {
                return Ok(LpSolution {
                    status: LpStatus::Infeasible,
                    x: Vec::new(),
                    objective: f64::NAN,
                    iterations: self.iterations,
                    duals: Vec::new(),
                });
            }
            self.expel_artificials();
        }
        self.phase_cost = vec![0.0; self.ncols];
        self.phase_cost[..self.n].copy_from_slice(&self.problem.cost);
        self.recompute_reduced();
        let end = self.optimize()?;
        let x = self.value[..self.n].to_vec();
        match end {
            PhaseEnd::Unbounded => Ok(LpSolution {
                status: LpStatus::Unbounded,
                objective: f64::INFINITY,
                x,
                iterations: self.iterations,
                duals: Vec::new(),
            }),
            PhaseEnd::Optimal => {
                let violation = self.problem.max_violation(&x);
                let scale = 1.0
                    + x.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
                    + self.problem.rhs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
                if violation > 1e-6 * scale {
                    return Err(LpError::Numerical {
                        iterations: self.iterations,
                        detail: format!("optimizer violates constraints by {violation:e}"),
                    });
                }
                let duals = (0..self.m).map(|i| (-self.reduced[self.n + i]).max(0.0)).collect();
                Ok(LpSolution {
                    status: LpStatus::Optimal,
                    objective: self.problem.objective_at(&x),
                    x,
                    iterations: self.iterations,
                    duals,
                })
            }
        }
    }

    /// Pivots basic artificials (all at zero after a successful phase one) out of the
    /// basis where possible, then fixes every artificial at zero.
    fn expel_artificials(&mut self) {
        let first_art = self.n + self.m;
        for r in 0..self.m {
            if self.basis[r] < first_art {
                continue;
            }
            let row = &self.tableau[r * self.ncols..(r + 1) * self.ncols];
            let mut best: Option<(usize, f64)> = None;
            for (j, &a) in row.iter().enumerate().take(first_art) {
                if self.state[j] != VarState::Basic && a.abs() > 1e-7 && best.is_none_or(|(_, b)| a.abs() > b) {
                    best = Some((j, a.abs()));
                }
            }
            let leaving = self.basis[r];
            self.value[leaving] = 0.0;
            if let Some((j, _)) = best {
                self.pivot(r, j);
                self.state[leaving] = VarState::AtLower;
            }
        }
        for j in first_art..self.ncols {
            self.upper[j] = 0.0;
            self.banned[j] = true;
            if self.state[j] != VarState::Basic {
                self.value[j] = 0.0;
            }
        }
    }

    fn optimize(&mut self) -> Result<PhaseEnd, LpError> {
        let tol = self.opts.tolerance;
        let mut bland = false;
        let mut degenerate_run = 0usize;
        let mut clean = true;
        loop {
            if self.iterations >= self.opts.max_iterations {
                return Err(LpError::IterationLimit(self.opts.max_iterations));
            }
            if self.since_refactor >= self.opts.refactor_every {
                self.refactor()?;
                clean = true;
            }
            let Some((j, dir)) = self.choose_entering(bland) else {
                if clean {
                    return Ok(PhaseEnd::Optimal);
                }
                // Confirm optimality on a freshly inverted basis.
                self.refactor()?;
                clean = true;
                continue;
            };
            self.iterations += 1;
            clean = false;

            let step = self.ratio_test(j, dir, bland);
            let (theta, leave) = match step {
                None => {
                    return Ok(PhaseEnd::Unbounded);
                }
                Some(s) => s,
            };
            if theta <= tol {
                degenerate_run += 1;
                if degenerate_run > self.opts.degenerate_limit {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
            let dirf = dir as f64;
            for i in 0..self.m {
                let a = self.tableau[i * self.ncols + j];
                if a != 0.0 {
                    self.value[self.basis[i]] -= dirf * a * theta;
                }
            }
            self.value[j] += dirf * theta;
            match leave {
                Leave::Flip => {
                    if dir > 0 {
                        self.value[j] = self.upper[j];
                        self.state[j] = VarState::AtUpper;
                    } else {
                        self.value[j] = self.lower[j];
                        self.state[j] = VarState::AtLower;
                    }
                }
                Leave::Row { row, to_upper } => {
                    let leaving = self.basis[row];
                    if to_upper {
                        self.value[leaving] = self.upper[leaving];
                        self.state[leaving] = VarState::AtUpper;
                    } else {
                        self.value[leaving] = self.lower[leaving];
                        self.state[leaving] = VarState::AtLower;
                    }
                    self.pivot(row, j);
                }
            }
        }
    }

    fn choose_entering(&self, bland: bool) -> Option<(usize, i8)> {
        let tol = self.opts.tolerance;
        let mut best: Option<(usize, i8, f64)> = None;
        for j in 0..self.ncols {
            if self.banned[j] || self.lower[j] == self.upper[j] {
                continue;
            }
            let d = self.reduced[j];
            let (dir, score) = match self.state[j] {
                VarState::Basic => continue,
                VarState::AtLower if d > tol => (1, d),
                VarState::AtUpper if d < -tol => (-1, -d),
                VarState::Free if d.abs() > tol => (if d > 0.0 { 1 } else { -1 }, d.abs()),
                _ => continue,
            };
            if bland {
                return Some((j, dir));
            }
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((j, dir, score));
            }
        }
        best.map(|(j, d, _)| (j, d))
    }

    fn ratio_test(&self, j: usize, dir: i8, bland: bool) -> Option<(f64, Leave)> {
        let tol = self.opts.tolerance;
        let mut theta = if self.lower[j].is_finite() && self.upper[j].is_finite() {
            self.upper[j] - self.lower[j]
        } else {
            f64::INFINITY
        };
        let mut leave = Leave::Flip;
        let mut leave_alpha = 0.0;
        let mut leave_var = usize::MAX;
        for i in 0..self.m {
            let alpha = self.tableau[i * self.ncols + j];
            if alpha.abs() <= PIVOT_TOL {
                continue;
            }
            let var = self.basis[i];
            let rate = -(dir as f64) * alpha;
            let (limit, to_upper) = if rate < 0.0 {
                if !self.lower[var].is_finite() {
                    continue;
                }
                (((self.value[var] - self.lower[var]) / -rate).max(0.0), false)
            } else {
                if !self.upper[var].is_finite() {
                    continue;
                }
                (((self.upper[var] - self.value[var]) / rate).max(0.0), true)
            };
            let better = if limit < theta - tol {
                true
            } else if limit <= theta + tol && !matches!(leave, Leave::Flip) {
                if bland {
                    var < leave_var
                } else {
                    alpha.abs() > leave_alpha
                }
            } else {
                false
            };
            if better {
                theta = limit;
                leave = Leave::Row { row: i, to_upper };
                leave_alpha = alpha.abs();
                leave_var = var;
            }
        }
        if theta.is_infinite() {
            None
        } else {
            Some((theta, leave))
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nc = self.ncols;
        let p = self.tableau[r * nc + j];
        for v in &mut self.tableau[r * nc..(r + 1) * nc] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.tableau[r * nc..(r + 1) * nc].to_vec();
        let nz: Vec<usize> = (0..nc).filter(|&k| pivot_row[k] != 0.0).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tableau[i * nc + j];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.tableau[i * nc..(i + 1) * nc];
            for &k in &nz {
                row[k] -= f * pivot_row[k];
            }
            row[j] = 0.0;
        }
        let d = self.reduced[j];
        if d != 0.0 {
            for &k in &nz {
                self.reduced[k] -= d * pivot_row[k];
            }
            self.reduced[j] = 0.0;
        }
        self.basis[r] = j;
        self.state[j] = VarState::Basic;
        self.since_refactor += 1;
    }

    fn recompute_reduced(&mut self) {
        let nc = self.ncols;
        let mut d = self.phase_cost.clone();
        for i in 0..self.m {
            let cb = self.phase_cost[self.basis[i]];
            if cb == 0.0 {
                continue;
            }
            for (k, dk) in d.iter_mut().enumerate() {
                *dk -= cb * self.tableau[i * nc + k];
            }
        }
        for i in 0..self.m {
            d[self.basis[i]] = 0.0;
        }
        self.reduced = d;
    }

    /// Rebuilds `B⁻¹·original`, basic values, and reduced costs from the original
    /// columns, discarding accumulated rounding error.
    fn refactor(&mut self) -> Result<(), LpError> {
        self.since_refactor = 0;
        if self.m == 0 {
            self.recompute_reduced();
            return Ok(());
        }
        let (m, nc) = (self.m, self.ncols);
        let b = DMatrix::from_fn(m, m, |i, k| self.original[i * nc + self.basis[k]]);
        let full = DMatrix::from_fn(m, nc, |i, k| self.original[i * nc + k]);
        let mut rhs = DMatrix::from_fn(m, 1, |i, _| self.problem.rhs[i]);
        for k in 0..nc {
            if self.state[k] == VarState::Basic || self.value[k] == 0.0 {
                continue;
            }
            for i in 0..m {
                rhs[(i, 0)] -= self.original[i * nc + k] * self.value[k];
            }
        }
        let lu = b.lu();
        let (Some(t), Some(xb)) = (lu.solve(&full), lu.solve(&rhs)) else {
            return Err(LpError::Numerical {
                iterations: self.iterations,
                detail: "singular basis during re-inversion".into(),
            });
        };
        for i in 0..m {
            for k in 0..nc {
                self.tableau[i * nc + k] = t[(i, k)];
            }
            self.value[self.basis[i]] = xb[(i, 0)];
        }
        if self.tableau.iter().any(|v| !v.is_finite()) {
            return Err(LpError::Numerical {
                iterations: self.iterations,
                detail: "non-finite tableau after re-inversion".into(),
            });
        }
        self.recompute_reduced();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Leave {
    Flip,
    Row { row: usize, to_upper: bool },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
