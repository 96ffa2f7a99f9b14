//! Ridge-regression readout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Regularisation used for every task unless overridden.
pub const DEFAULT_LAMBDA: f64 = 1.0e-9;

#[derive(Debug, Error)]
pub enum ReadoutError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("normal equations are singular; use a positive regularisation (lambda = {lambda})")]
    Singular { lambda: f64 },
    #[error("lambda must be finite and nonnegative, got {0}")]
    BadLambda(f64),
    #[error("csv: {0}")]
    Io(#[from] std::io::Error),
}

/// Borrowed row-major block of feature rows.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    data: &'a [f64],
    cols: usize,
}

impl<'a> Rows<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Self {
        assert!(cols > 0 && data.len() % cols == 0, "row block is not rectangular");
        Self { data, cols }
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, n: usize) -> &'a [f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f64]> {
        self.data.chunks_exact(self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutModel {
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub rows_used: usize,
    /// Squared ratio of the largest to smallest triangular pivot, a cheap
    /// conditioning indicator of the regularised normal matrix.
    pub condition_estimate: f64,
}

impl ReadoutModel {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), ReadoutError> {
        writeln!(w, "# lambda={} rows_used={}", self.lambda, self.rows_used)?;
        writeln!(w, "node,weight")?;
        for (j, v) in self.weights.iter().enumerate() {
            writeln!(w, "{j},{v}")?;
        }
        Ok(())
    }
}

/// Ridge solver for a fixed feature block, reusable across many targets.
///
/// The minimiser of `|Xw - y|² + Λ|w|²` is found from a Householder QR of
/// the stacked matrix `[X; √Λ I]`, which squares the conditioning less than
/// forming `XᵀX + ΛI` would. Each extra target costs one `Qᵀ` application
/// and a triangular solve.
pub struct RidgeSolver<'a> {
    x: Rows<'a>,
    qr: nalgebra::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<f64>,
    lambda: f64,
    condition_estimate: f64,
}

impl<'a> RidgeSolver<'a> {
    pub fn new(x: Rows<'a>, lambda: f64) -> Result<Self, ReadoutError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ReadoutError::BadLambda(lambda));
        }
        let (rows, n) = (x.n_rows(), x.n_cols());
        if rows < n {
            log::warn!("ridge readout trained on {rows} rows for {n} features");
        }
        let mut a = DMatrix::<f64>::zeros(rows + n, n);
        for (i, row) in x.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                a[(i, j)] = *v;
            }
        }
        let s = lambda.sqrt();
        for j in 0..n {
            a[(rows + j, j)] = s;
        }
        let qr = a.qr();
        let r = qr.r();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for d in r.diagonal().iter() {
            lo = lo.min(d.abs());
            hi = hi.max(d.abs());
        }
        // Pivots below roundoff of the largest one mean a rank-deficient system.
        if !(lo > hi * f64::EPSILON * (rows + n) as f64) || !lo.is_finite() {
            return Err(ReadoutError::Singular { lambda });
        }
        Ok(Self {
            x,
            qr,
            r,
            lambda,
            condition_estimate: (hi / lo).powi(2),
        })
    }

    pub fn solve(&self, y: &[f64]) -> Result<ReadoutModel, ReadoutError> {
        let rows = self.x.n_rows();
        if y.len() != rows {
            return Err(ReadoutError::Dimension(format!("{} targets for {rows} rows", y.len())));
        }
        let n = self.x.n_cols();
        let mut b = DVector::<f64>::zeros(rows + n);
        b.rows_mut(0, rows).copy_from_slice(y);
        self.qr.q_tr_mul(&mut b);
        let rhs = b.rows(0, n).into_owned();
        let w = self
            .r
            .solve_upper_triangular(&rhs)
            .ok_or(ReadoutError::Singular { lambda: self.lambda })?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(ReadoutError::Singular { lambda: self.lambda });
        }
        Ok(ReadoutModel {
            weights: w.iter().copied().collect(),
            lambda: self.lambda,
            rows_used: rows,
            condition_estimate: self.condition_estimate,
        })
    }
}

/// Solve `(XᵀX + ΛI) W = Xᵀy`; no intercept.
pub fn train_ridge(x: Rows<'_>, y: &[f64], lambda: f64) -> Result<ReadoutModel, ReadoutError> {
    if y.len() != x.n_rows() {
        return Err(ReadoutError::Dimension(format!("{} targets for {} rows", y.len(), x.n_rows())));
    }
    RidgeSolver::new(x, lambda)?.solve(y)
}

/// `ŷ(n) = Σ_j W_j X(n, j)`.
pub fn predict(x: Rows<'_>, model: &ReadoutModel) -> Result<Vec<f64>, ReadoutError> {
    predict_weights(x, &model.weights)
}

pub fn predict_weights(x: Rows<'_>, weights: &[f64]) -> Result<Vec<f64>, ReadoutError> {
    if x.n_cols() != weights.len() {
        return Err(ReadoutError::Dimension(format!(
            "{} features but {} weights",
            x.n_cols(),
            weights.len()
        )));
    }
    Ok(x.iter()
        .map(|row| row.iter().zip(weights).map(|(a, b)| a * b).sum())
        .collect())
}
