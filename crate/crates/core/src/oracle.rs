//! Independent verification machinery: the order-3 tensor gradient of
//! log-sum-exp, gradient composition through a model-contraction callback,
//! central finite differences, and tolerance reports. Everything here is
//! deliberately brute-force so it cannot share bugs with the analytic
//! gradient implementations it certifies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax_seq, Matrix};
use crate::models::{linear_forward, LabelMatrix, LinearParams};

/// Dense order-3 tensor, row-major over `(i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        let (_, d2, d3) = self.dims;
        self.data[(i * d2 + j) * d3 + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum over the first index: `M_jk = sum_i T_ijk`, shape `(d2, d3)`.
    pub fn contract_first(&self) -> Matrix {
        let (d1, d2, d3) = self.dims;
        Matrix::from_fn(d2, d3, |j, k| (0..d1).map(|i| self.get(i, j, k)).sum())
    }

    /// The `(d2, d3)` slice at fixed first index.
    pub fn slice_first(&self, i: usize) -> Matrix {
        let (_, d2, d3) = self.dims;
        Matrix::from_fn(d2, d3, |j, k| self.get(i, j, k))
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims, "Tensor3::max_abs_diff dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-paired outer product `(A (x) B)_ijk = A_ij B_ik`; dims
/// `(rows(A), cols(A), cols(B))`. Rows of `A` and `B` must match.
pub fn barotimes(a: &Matrix, b: &Matrix) -> Result<Tensor3> {
    if a.rows() != b.rows() {
        return Err(Error::dim(
            "barotimes",
            format!("A has {} rows, B has {}", a.rows(), b.rows()),
        ));
    }
    let dims = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for i in 0..dims.0 {
        for j in 0..dims.1 {
            for k in 0..dims.2 {
                let v = a.get(i, j) * b.get(i, k);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        op: "barotimes",
                        detail: format!("entry ({i}, {j}, {k}) overflowed"),
                    });
                }
                data.push(v);
            }
        }
    }
    Ok(Tensor3 { dims, data })
}

/// Full feature gradient of the per-component log-sum-exp of the linear
/// model: `sigma_i(Z theta^T)^T (x) theta`, dims `(Fo, S, Fi)`.
///
/// The first index ranges over LSE output components: `slice_first(f)` is
/// the `S x Fi` gradient of `lse_seq(Z theta^T)[f]` in `Z`, and contracting
/// the first index against the all-ones vector recovers
/// [`crate::models::cross_attention`].
pub fn lse_grad_tensor(z: &Matrix, p: &LinearParams) -> Result<Tensor3> {
    let sigma = softmax_seq(&linear_forward(z, p)?);
    barotimes(&sigma.transpose(), &p.theta)
}

/// Chain-rule composition of the cross-entropy gradient for a general
/// model: the caller supplies the contraction `M -> M : d_Z N(Z, theta)`
/// and this applies it to `M = sigma - C`.
///
/// With the linear-model callback `M -> M theta` this reproduces
/// [`crate::models::grad_z_linear`]; with the quadratic callback
/// `M -> M Z theta^T + M^T Z theta` it reproduces
/// [`crate::models::grad_z_quad`] in its exact form.
pub fn compose_general_grad(
    sigma: &Matrix,
    c: &LabelMatrix,
    contract: impl Fn(&Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    if sigma.shape() != (c.rows(), c.cols()) {
        return Err(Error::dim(
            "compose_general_grad",
            format!(
                "softmax is {}x{} but labels are {}x{}",
                sigma.rows(),
                sigma.cols(),
                c.rows(),
                c.cols()
            ),
        ));
    }
    contract(&sigma.sub(c.values())?)
}

/// Entrywise central finite difference of a scalar loss:
/// `(loss(Z + step E_rc) - loss(Z - step E_rc)) / (2 step)`.
///
/// A non-finite loss value is reported as an oracle error naming the
/// probed entry; errors raised by the loss itself propagate unchanged.
pub fn fd_gradient(
    mut loss: impl FnMut(&Matrix) -> Result<f64>,
    z: &Matrix,
    step: f64,
) -> Result<Matrix> {
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::param(
            "fd_gradient",
            format!("step must be positive and finite, got {step}"),
        ));
    }
    let (rows, cols) = z.shape();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut data = z.data().to_vec();
                data[r * cols + c] += delta;
                let v = loss(&Matrix::new(rows, cols, data)?)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::OracleProbe { row: r, col: c })
                }
            };
            let plus = probe(step)?;
            let minus = probe(-step)?;
            out[r * cols + c] = (plus - minus) / (2.0 * step);
        }
    }
    Matrix::new(rows, cols, out)
}

/// Comparison of an analytic gradient against a numeric one.
///
/// Per entry, the error `|a - n|` is reported relative to
/// `max(|a|, |n|, abs_tol)`; errors at or below `abs_tol` count as zero
/// relative error (the absolute floor), so agreement on near-zero entries
/// is not penalized. `passed` holds exactly when `max_rel_error <= rel_tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_entry: (usize, usize),
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub passed: bool,
}

pub fn grad_check(
    analytic: &Matrix,
    numeric: &Matrix,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::dim(
            "grad_check",
            format!(
                "analytic is {}x{}, numeric is {}x{}",
                analytic.rows(),
                analytic.cols(),
                numeric.rows(),
                numeric.cols()
            ),
        ));
    }
    let tols_valid = rel_tol.is_finite() && rel_tol > 0.0 && abs_tol.is_finite() && abs_tol > 0.0;
    if !tols_valid {
        return Err(Error::param(
            "grad_check",
            format!("tolerances must be positive and finite, got rel {rel_tol}, abs {abs_tol}"),
        ));
    }
    let mut max_abs_error = 0.0_f64;
    let mut max_rel_error = 0.0_f64;
    let mut worst_entry = (0, 0);
    for r in 0..analytic.rows() {
        for c in 0..analytic.cols() {
            let a = analytic.get(r, c);
            let n = numeric.get(r, c);
            let err = (a - n).abs();
            let rel = if err <= abs_tol {
                0.0
            } else {
                err / a.abs().max(n.abs()).max(abs_tol)
            };
            max_abs_error = max_abs_error.max(err);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_entry = (r, c);
            }
        }
    }
    Ok(GradReport {
        max_abs_error,
        max_rel_error,
        worst_entry,
        analytic_norm: analytic.frobenius_norm(),
        numeric_norm: numeric.frobenius_norm(),
        passed: max_rel_error <= rel_tol,
    })
}
