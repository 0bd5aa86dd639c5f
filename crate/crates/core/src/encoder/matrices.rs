//! Prediction matrices and the linear maps from stacked predicate values to per-step
//! robustness contributions.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::EncodeError;
use crate::formula::{Interval, PredicateMap};
use crate::robustness::{checked_k1, K1Policy, K1Query, TemporalKind};
use crate::system::LtiSystem;

/// Predicted predicate values over a horizon:
/// `z_st = H1·x(k0) + H2·u_st + 1_N ⊗ c`, where `z_st` stacks `z(k0+1) … z(k0+N)` and
/// `u_st` stacks `u(k0) … u(k0+N-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub horizon: usize,
    pub predicates: usize,
    pub inputs: usize,
}

pub fn build_stacked(sys: &LtiSystem, pm: &PredicateMap, horizon: usize) -> Result<StackedModel, EncodeError> {
    if horizon == 0 {
        return Err(EncodeError::Window("horizon must be at least one step".into()));
    }
    if pm.state_dim() != sys.state_dim() {
        return Err(EncodeError::Dimension(format!(
            "predicate map acts on {} states, system has {}",
            pm.state_dim(),
            sys.state_dim()
        )));
    }
    let (n, m, g) = (sys.state_dim(), sys.input_dim(), pm.len());
    let c = pm.matrix();
    // C·A^j for j = 0..N
    let mut ca = Vec::with_capacity(horizon + 1);
    ca.push(c.clone());
    for j in 1..=horizon {
        let next = &ca[j - 1] * sys.a();
        ca.push(next);
    }
    let cab: Vec<DMatrix<f64>> = ca.iter().take(horizon).map(|m| m * sys.b()).collect();
    let mut h1 = DMatrix::zeros(g * horizon, n);
    let mut h2 = DMatrix::zeros(g * horizon, m * horizon);
    for i in 0..horizon {
        h1.view_mut((i * g, 0), (g, n)).copy_from(&ca[i + 1]);
        for j in 0..=i {
            h2.view_mut((i * g, j * m), (g, m)).copy_from(&cab[i - j]);
        }
    }
    let mut offset = DVector::zeros(g * horizon);
    for i in 0..horizon {
        offset.rows_mut(i * g, g).copy_from(pm.offset());
    }
    Ok(StackedModel { h1, h2, offset, horizon, predicates: g, inputs: m })
}

impl StackedModel {
    /// Predicted `z(k0+1) … z(k0+N)` for the given input sequence.
    pub fn predict(&self, x0: &DVector<f64>, u_st: &DVector<f64>) -> Vec<Vec<f64>> {
        let z = &self.h1 * x0 + &self.h2 * u_st + &self.offset;
        z.as_slice().chunks(self.predicates).map(<[f64]>::to_vec).collect()
    }

    /// `H1·x0 + 1_N ⊗ c`: the prediction under zero input.
    pub fn free_response(&self, x0: &DVector<f64>) -> DVector<f64> {
        &self.h1 * x0 + &self.offset
    }
}

/// `[0 | H2]` with `u_x_count` zero columns in front, so that the epigraph variables can
/// be prepended to the input sequence without changing the prediction.
pub fn build_h2man(h2: &DMatrix<f64>, u_x_count: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(h2.nrows(), u_x_count + h2.ncols());
    out.view_mut((0, u_x_count), (h2.nrows(), h2.ncols())).copy_from(h2);
    out
}

/// The evaluation steps covered by one prediction: `k' ∈ [k0-h+1, k0+N-h]`, one per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub k0: i64,
    pub h: u32,
    pub horizon: usize,
}

impl Window {
    pub fn new(k0: i64, h: u32, horizon: usize) -> Result<Self, EncodeError> {
        if horizon == 0 {
            return Err(EncodeError::Window("horizon must be at least one step".into()));
        }
        if (horizon as u64) < h as u64 {
            return Err(EncodeError::HorizonTooShort { horizon, length: h });
        }
        Ok(Window { k0, h, horizon })
    }

    pub fn k_low(&self) -> i64 {
        self.k0 - self.h as i64 + 1
    }

    pub fn k_high(&self) -> i64 {
        self.k0 + self.horizon as i64 - self.h as i64
    }

    /// Last predicted step, `k0 + N`.
    pub fn last_step(&self) -> i64 {
        self.k0 + self.horizon as i64
    }

    pub fn rows(&self) -> usize {
        self.horizon
    }

    pub fn eval_steps(&self) -> impl Iterator<Item = i64> {
        self.k_low()..=self.k_high()
    }

    /// Column block holding `z(t)`.
    pub fn block_of(&self, t: i64) -> usize {
        debug_assert!(t >= self.k_low());
        (t - self.k_low()) as usize
    }

    pub fn step_of_block(&self, block: usize) -> i64 {
        self.k_low() + block as i64
    }
}

/// Row `i` holds the robustness contribution at evaluation step `k_low + i` as weights on
/// `z_all`, whose column `block·channels + c` is channel `c` at step `k_low + block`.
#[derive(Debug, Clone, PartialEq)]
pub struct EMatrix {
    channels: usize,
    data: DMatrix<f64>,
}

impl EMatrix {
    pub fn from_matrix(channels: usize, data: DMatrix<f64>) -> Result<Self, EncodeError> {
        if channels == 0 || data.ncols() % channels != 0 {
            return Err(EncodeError::Dimension(format!(
                "{} columns do not split into blocks of {channels}",
                data.ncols()
            )));
        }
        Ok(EMatrix { channels, data })
    }

    fn zeros(rows: usize, channels: usize, blocks: usize) -> Self {
        EMatrix { channels, data: DMatrix::zeros(rows, channels * blocks) }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn blocks(&self) -> usize {
        self.data.ncols() / self.channels
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn get(&self, row: usize, block: usize, channel: usize) -> f64 {
        self.data[(row, block * self.channels + channel)]
    }

    fn add(&mut self, row: usize, block: usize, channel: usize, v: f64) {
        self.data[(row, block * self.channels + channel)] += v;
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.row_iter().map(|r| r.sum()).collect()
    }

    /// Nonzero entries of a row as `(block, channel, weight)`.
    pub fn row_entries(&self, row: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let ch = self.channels;
        self.data
            .row(row)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(move |(col, v)| (col / ch, col % ch, *v))
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Appends zero blocks so the matrix has `blocks` column blocks.
    pub fn widened(&self, blocks: usize) -> EMatrix {
        let mut out = EMatrix::zeros(self.rows(), self.channels, blocks.max(self.blocks()));
        out.data.view_mut((0, 0), (self.rows(), self.cols())).copy_from(&self.data);
        out
    }

    pub fn select_row(&self, row: usize) -> EMatrix {
        EMatrix { channels: self.channels, data: self.data.rows(row, 1).into_owned() }
    }

    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.data)
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in m.row_iter() {
        let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

fn check_k1(w: &Window, interval: Interval, k1: &[i64]) -> Result<(), EncodeError> {
    if k1.len() != w.rows() {
        return Err(EncodeError::Dimension(format!("{} k1 values for {} rows", k1.len(), w.rows())));
    }
    for (kp, &k) in w.eval_steps().zip(k1) {
        if !interval.contains_offset(k - kp) {
            return Err(EncodeError::K1OutOfRange { k: kp, k1: k, lo: kp + interval.lo() as i64, hi: kp + interval.hi() as i64 });
        }
        if k > w.last_step() {
            return Err(EncodeError::K1OutOfRange { k: kp, k1: k, lo: kp + interval.lo() as i64, hi: w.last_step() });
        }
    }
    Ok(())
}

fn width_for(w: &Window, last_step: i64) -> usize {
    w.rows().max(w.block_of(last_step) + 1)
}

/// Until over two channels (left operand, right operand): row `i` has `1/2` on the right
/// operand at `k1(k')` and `1/(2(k1-k'+1))` on the left operand at every step of `[k', k1]`.
pub fn build_e_until(w: &Window, interval: Interval, k1: &[i64]) -> Result<EMatrix, EncodeError> {
    check_k1(w, interval, k1)?;
    let last = k1.iter().copied().max().unwrap_or(w.k_low());
    let mut e = EMatrix::zeros(w.rows(), 2, width_for(w, last));
    for (i, (kp, &k)) in w.eval_steps().zip(k1).enumerate() {
        e.add(i, w.block_of(k), 1, 0.5);
        let share = 0.5 / (k - kp + 1) as f64;
        for t in kp..=k {
            e.add(i, w.block_of(t), 0, share);
        }
    }
    Ok(e)
}

/// Eventually: row `i` selects the operand at `k1(k')`.
pub fn build_e_eventually(w: &Window, interval: Interval, k1: &[i64]) -> Result<EMatrix, EncodeError> {
    check_k1(w, interval, k1)?;
    let last = k1.iter().copied().max().unwrap_or(w.k_low());
    let mut e = EMatrix::zeros(w.rows(), 1, width_for(w, last));
    for (i, &k) in k1.iter().enumerate() {
        e.add(i, w.block_of(k), 0, 1.0);
    }
    Ok(e)
}

/// Always: row `i` averages the operand over `[k'+a, k'+b]`.
pub fn build_e_always(w: &Window, interval: Interval) -> Result<EMatrix, EncodeError> {
    let last = w.k_high() + interval.hi() as i64;
    if last > w.last_step() {
        return Err(EncodeError::Window(format!(
            "always window reaches step {last} beyond the prediction end {}",
            w.last_step()
        )));
    }
    let mut e = EMatrix::zeros(w.rows(), 1, width_for(w, last));
    let share = 1.0 / interval.len() as f64;
    for (i, kp) in w.eval_steps().enumerate() {
        for t in (kp + interval.lo() as i64)..=(kp + interval.hi() as i64) {
            e.add(i, w.block_of(t), 0, share);
        }
    }
    Ok(e)
}

/// `k1(k')` for every evaluation step of the window.
pub fn k1_schedule(
    w: &Window,
    node: usize,
    kind: TemporalKind,
    interval: Interval,
    policy: &dyn K1Policy,
) -> Result<Vec<i64>, EncodeError> {
    w.eval_steps()
        .map(|k| checked_k1(policy, &K1Query { node, kind, k, interval }).map_err(EncodeError::from))
        .collect()
}

/// Row `h - k_event` (one-based) of a one-time matrix: the row whose evaluation step is
/// the activation step of the event.
pub fn select_one_time_row(e: &EMatrix, h: u32, k_event: u32) -> Result<EMatrix, EncodeError> {
    if k_event >= h {
        return Err(EncodeError::OneTimeElapsed { k_event, length: h });
    }
    let row = (h - k_event - 1) as usize;
    if row >= e.rows() {
        return Err(EncodeError::Dimension(format!("row {} of a {}-row matrix", row + 1, e.rows())));
    }
    Ok(e.select_row(row))
}

/// Spreads the columns of one conjunction member over the joint column space:
/// column `j` of member `member` (zero-based) of `count` goes to `count·j + member`.
pub fn pad_for_conjunction(e: &EMatrix, member: usize, count: usize) -> Result<EMatrix, EncodeError> {
    if member >= count {
        return Err(EncodeError::Dimension(format!("member {member} of {count}")));
    }
    let mut data = DMatrix::zeros(e.rows(), e.cols() * count);
    for j in 0..e.cols() {
        data.set_column(count * j + member, &e.data.column(j));
    }
    Ok(EMatrix { channels: e.channels * count, data })
}

/// Epigraph system `Q·[u_x; u_st] ≤ R·z_all`: for each row `i` and member `j`, in the
/// order `(i=1,j=1), (i=1,j=2), …`, a row bounding `u_{x,i}` by member `j`'s contribution.
/// `input_columns` zero columns are appended to `Q` for the input sequence.
pub fn build_qr(padded: &[EMatrix], input_columns: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), EncodeError> {
    let Some(first) = padded.first() else {
        return Err(EncodeError::Dimension("no members".into()));
    };
    let (rows, cols) = (first.rows(), first.cols());
    if padded.iter().any(|e| e.rows() != rows || e.cols() != cols) {
        return Err(EncodeError::Dimension("members differ in shape".into()));
    }
    let j = padded.len();
    let mut q = DMatrix::zeros(rows * j, rows + input_columns);
    let mut r = DMatrix::zeros(rows * j, cols);
    for i in 0..rows {
        for (jj, e) in padded.iter().enumerate() {
            q[(i * j + jj, i)] = 1.0;
            r.set_row(i * j + jj, &e.data.row(i));
        }
    }
    Ok((q, r))
}
