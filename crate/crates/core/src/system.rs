use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("input bound {index}: lower {lower} exceeds upper {upper}")]
    InvertedBounds { index: usize, lower: f64, upper: f64 },
    #[error("sampling period must be positive, got {0}")]
    SamplingPeriod(f64),
}

/// `x(k+1) = A·x(k) + B·u(k)` with box-constrained inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sampling_period: f64,
    input_lower: DVector<f64>,
    input_upper: DVector<f64>,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sampling_period: f64,
        input_lower: DVector<f64>,
        input_upper: DVector<f64>,
    ) -> Result<Self, SystemError> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(SystemError::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(SystemError::Dimension(format!("B is {}x{}, expected {n} rows", b.nrows(), b.ncols())));
        }
        let m = b.ncols();
        if input_lower.len() != m || input_upper.len() != m {
            return Err(SystemError::Dimension(format!("input bounds must have {m} entries")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::NonFinite("A"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::NonFinite("B"));
        }
        if input_lower.iter().chain(input_upper.iter()).any(|v| v.is_nan()) {
            return Err(SystemError::NonFinite("input bounds"));
        }
        for i in 0..m {
            if input_lower[i] > input_upper[i] {
                return Err(SystemError::InvertedBounds { index: i, lower: input_lower[i], upper: input_upper[i] });
            }
        }
        if !(sampling_period.is_finite() && sampling_period > 0.0) {
            return Err(SystemError::SamplingPeriod(sampling_period));
        }
        Ok(LtiSystem { a, b, sampling_period, input_lower, input_upper })
    }

    /// Builds a system from row-major nested vectors.
    pub fn from_rows(
        a: &[Vec<f64>],
        b: &[Vec<f64>],
        sampling_period: f64,
        input_lower: &[f64],
        input_upper: &[f64],
    ) -> Result<Self, SystemError> {
        LtiSystem::new(
            matrix_from_rows(a, "A")?,
            matrix_from_rows(b, "B")?,
            sampling_period,
            DVector::from_column_slice(input_lower),
            DVector::from_column_slice(input_upper),
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sampling_period(&self) -> f64 {
        self.sampling_period
    }

    pub fn input_lower(&self) -> &DVector<f64> {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &DVector<f64> {
        &self.input_upper
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn input_in_bounds(&self, u: &[f64], tol: f64) -> bool {
        u.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.input_lower[i] - tol && v <= self.input_upper[i] + tol)
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, SystemError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(SystemError::Dimension(format!("{name} has rows of unequal length")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}
