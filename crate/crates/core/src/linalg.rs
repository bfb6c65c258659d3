//! Dense real-matrix primitives with sequence-axis softmax and log-sum-exp.
//!
//! Everything downstream (models, flow integrators, block steppers, the
//! finite-difference oracle) is built on these. Matrices are immutable
//! values in 64-bit floating point; every operation returns a fresh result
//! so that trajectory snapshots and oracle comparisons never see mutated
//! state. The sequence axis is the row axis: `softmax_seq` and `lse_seq`
//! act down each column independently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix. Invariants: at least one row and one
/// column, every entry finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialized form of a [`Matrix`]: shape header plus row-major entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRepr {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Matrix> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl Matrix {
    /// Build a matrix from row-major data, validating the invariants.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::param(
                "Matrix::new",
                format!("dimensions must be at least 1x1, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::param(
                "Matrix::new",
                format!("data length {} does not match {rows}x{cols}", data.len()),
            ));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(
                "Matrix::new",
                format!("non-finite entry at ({}, {})", idx / cols, idx % cols),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// All-zero matrix. Panics on zero dimensions (developer error).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "zero-sized matrix");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Build entrywise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows >= 1 && cols >= 1, "zero-sized matrix");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Build from nested row slices, validating shape homogeneity.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::param("Matrix::from_rows", "no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::param("Matrix::from_rows", "ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    /// Entrywise map. Internal because arbitrary maps can break finiteness;
    /// public ops that use it keep the invariant.
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
                for j in 0..rhs.cols {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    /// `self + k * rhs`, the combination every integrator step needs.
    pub fn add_scaled(&self, rhs: &Matrix, k: f64) -> Result<Matrix> {
        self.zip_with("add_scaled", rhs, |a, b| a + k * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| k * v)
    }

    fn zip_with(
        &self,
        op: &'static str,
        rhs: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Column sums, i.e. the row vector `1^T A`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (sum, v) in sums.iter_mut().zip(row) {
                *sum += v;
            }
        }
        sums
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; panics on shape mismatch
    /// (test comparison helper, not part of the model arithmetic).
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Softmax down the sequence (row) axis, independently per column:
/// `out[i][j] = exp(A[i][j]) / sum_k exp(A[k][j])`.
///
/// Computed with per-column max subtraction so that entries of magnitude
/// up to ~1e4 stay finite.
pub fn softmax_seq(a: &Matrix) -> Matrix {
    let (rows, cols) = a.shape();
    let mut out = vec![0.0; rows * cols];
    for j in 0..cols {
        let mut m = f64::NEG_INFINITY;
        for i in 0..rows {
            m = m.max(a.get(i, j));
        }
        let mut sum = 0.0;
        for i in 0..rows {
            let e = (a.get(i, j) - m).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for i in 0..rows {
            out[i * cols + j] /= sum;
        }
    }
    Matrix {
        rows,
        cols,
        data: out,
    }
}

/// Log-sum-exp down the sequence (row) axis, one entry per column:
/// `out[j] = log sum_k exp(A[k][j])`, max-subtracted for stability.
pub fn lse_seq(a: &Matrix) -> Vec<f64> {
    let (rows, cols) = a.shape();
    let mut out = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut m = f64::NEG_INFINITY;
        for i in 0..rows {
            m = m.max(a.get(i, j));
        }
        let sum: f64 = (0..rows).map(|i| (a.get(i, j) - m).exp()).sum();
        out.push(m + sum.ln());
    }
    out
}

/// Row index of the largest entry in each column; ties take the lowest
/// index (strict comparison never replaces an earlier maximum).
pub(crate) fn argmax_per_column(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..m.rows() {
                if m.get(i, j) > m.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Frobenius inner product `<A, B> = sum_ij A_ij B_ij`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "frobenius_inner",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).sum())
}

/// Assemble the symmetric positive-definite `theta = phi phi^T` from a
/// lower-triangular square root with strictly positive diagonal.
pub fn assemble_spd(phi: &Matrix) -> Result<Matrix> {
    if phi.rows() != phi.cols() {
        return Err(Error::param(
            "assemble_spd",
            format!("phi must be square, got {:?}", phi.shape()),
        ));
    }
    for i in 0..phi.rows() {
        if phi.get(i, i) <= 0.0 {
            return Err(Error::param(
                "assemble_spd",
                format!(
                    "phi diagonal entry ({i}, {i}) = {} not positive",
                    phi.get(i, i)
                ),
            ));
        }
        for j in (i + 1)..phi.cols() {
            if phi.get(i, j) != 0.0 {
                return Err(Error::param(
                    "assemble_spd",
                    format!("phi entry ({i}, {j}) above the diagonal is nonzero"),
                ));
            }
        }
    }
    phi.matmul(&phi.transpose())
}
