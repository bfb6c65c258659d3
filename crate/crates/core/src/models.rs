//! Linear and quadratic multinomial-regression models over latent features,
//! point-wise cross-entropy, analytic feature/parameter gradients, and the
//! attention operators they reduce to.
//!
//! Conventions: features `Z` are `S x Fi` (sequence positions are rows),
//! labels `C` are column-stochastic `S x Fo` (square `S x S` for the
//! quadratic model), linear parameters `theta` are `Fo x Fi`, quadratic
//! parameters are symmetric positive-definite `theta = phi phi^T` with a
//! lower-triangular `phi`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{assemble_spd, frobenius_inner, lse_seq, softmax_seq, Matrix};

/// Model logits `N(Z, theta)`: `S x Fo` for the linear model, `S x S` for
/// the quadratic one. Finiteness is enforced by [`Matrix`] construction.
pub type Logits = Matrix;

/// Column-stochastic label matrix: entries in `[0, 1]`, every column
/// summing to 1 within 1e-12. One-hot columns are the motivating special
/// case but are not required; use [`LabelMatrix::new_one_hot`] to opt into
/// strict validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct LabelMatrix {
    values: Matrix,
}

impl LabelMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        for (idx, &v) in values.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(
                    "LabelMatrix::new",
                    format!(
                        "entry ({}, {}) = {v} outside [0, 1]",
                        idx / values.cols(),
                        idx % values.cols()
                    ),
                ));
            }
        }
        for (j, sum) in values.col_sums().iter().enumerate() {
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::param(
                    "LabelMatrix::new",
                    format!("column {j} sums to {sum}, expected 1"),
                ));
            }
        }
        Ok(LabelMatrix { values })
    }

    /// Strict variant: every column must have exactly one entry equal to 1
    /// and the rest exactly 0.
    pub fn new_one_hot(values: Matrix) -> Result<Self> {
        for j in 0..values.cols() {
            let mut ones = 0;
            for i in 0..values.rows() {
                let v = values.get(i, j);
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::param(
                        "LabelMatrix::new_one_hot",
                        format!("entry ({i}, {j}) = {v} is neither 0 nor 1"),
                    ));
                }
            }
            if ones != 1 {
                return Err(Error::param(
                    "LabelMatrix::new_one_hot",
                    format!("column {j} has {ones} unit entries, expected exactly 1"),
                ));
            }
        }
        LabelMatrix::new(values)
    }

    /// One-hot labels with `positions[j]` the hot sequence position of
    /// column `j`.
    pub fn from_hot_positions(s: usize, positions: &[usize]) -> Result<Self> {
        if let Some(&p) = positions.iter().find(|&&p| p >= s) {
            return Err(Error::param(
                "LabelMatrix::from_hot_positions",
                format!("position {p} out of range for sequence length {s}"),
            ));
        }
        let values = Matrix::from_fn(s, positions.len(), |i, j| {
            if positions[j] == i {
                1.0
            } else {
                0.0
            }
        });
        LabelMatrix::new_one_hot(values)
    }

    /// Uniform (maximally degenerate) labels: every entry `1/S`.
    pub fn uniform(s: usize, fo: usize) -> Self {
        let values = Matrix::from_fn(s, fo, |_, _| 1.0 / s as f64);
        LabelMatrix { values }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn is_strict_one_hot(&self) -> bool {
        (0..self.cols()).all(|j| {
            (0..self.rows()).all(|i| {
                let v = self.values.get(i, j);
                v == 0.0 || v == 1.0
            }) && (0..self.rows())
                .filter(|&i| self.values.get(i, j) == 1.0)
                .count()
                == 1
        })
    }

    /// Hot position per column for strict one-hot labels, `None` otherwise.
    pub fn hot_positions(&self) -> Option<Vec<usize>> {
        if !self.is_strict_one_hot() {
            return None;
        }
        Some(
            (0..self.cols())
                .map(|j| {
                    (0..self.rows())
                        .find(|&i| self.values.get(i, j) == 1.0)
                        .unwrap()
                })
                .collect(),
        )
    }
}

impl TryFrom<Matrix> for LabelMatrix {
    type Error = Error;
    fn try_from(values: Matrix) -> Result<Self> {
        LabelMatrix::new(values)
    }
}

impl From<LabelMatrix> for Matrix {
    fn from(c: LabelMatrix) -> Matrix {
        c.values
    }
}

/// Parameters of the linear model `N(Z, theta) = Z theta^T`,
/// `theta` of shape `Fo x Fi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub theta: Matrix,
}

impl LinearParams {
    pub fn new(theta: Matrix) -> Self {
        LinearParams { theta }
    }

    pub fn out_dim(&self) -> usize {
        self.theta.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.theta.cols()
    }
}

/// Parameters of the quadratic model `N(Z, theta) = Z theta Z^T` with
/// `theta = phi phi^T` for a lower-triangular `phi` with positive diagonal.
/// `theta` is cached at construction and is symmetric positive definite by
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadParamsRepr", into = "QuadParamsRepr")]
pub struct QuadParams {
    phi: Matrix,
    theta: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuadParamsRepr {
    phi: Matrix,
}

impl TryFrom<QuadParamsRepr> for QuadParams {
    type Error = Error;
    fn try_from(r: QuadParamsRepr) -> Result<Self> {
        QuadParams::new(r.phi)
    }
}

impl From<QuadParams> for QuadParamsRepr {
    fn from(p: QuadParams) -> Self {
        QuadParamsRepr { phi: p.phi }
    }
}

impl QuadParams {
    pub fn new(phi: Matrix) -> Result<Self> {
        let theta = assemble_spd(&phi)?;
        Ok(QuadParams { phi, theta })
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.phi.rows()
    }
}

/// Which form of the quadratic feature gradient to use.
///
/// `Exact` is the finite-difference-verified gradient
/// `(sigma + sigma^T - C - C^T) Z theta`. `PaperLiteral` is the two-term
/// shortcut `2 sigma Z theta - (C + C^T) Z theta`, which would need the
/// column-axis softmax of a symmetric matrix to be symmetric; the two
/// differ by `(sigma^T - sigma) Z theta` in general.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradForm {
    Exact,
    PaperLiteral,
}

fn check_linear_dims(op: &'static str, z: &Matrix, p: &LinearParams) -> Result<()> {
    if z.cols() != p.in_dim() {
        return Err(Error::dim(
            op,
            format!(
                "Z has {} feature columns but theta expects {}",
                z.cols(),
                p.in_dim()
            ),
        ));
    }
    Ok(())
}

fn check_labels(op: &'static str, n_rows: usize, n_cols: usize, c: &LabelMatrix) -> Result<()> {
    if (c.rows(), c.cols()) != (n_rows, n_cols) {
        return Err(Error::dim(
            op,
            format!(
                "labels are {}x{} but logits are {}x{}",
                c.rows(),
                c.cols(),
                n_rows,
                n_cols
            ),
        ));
    }
    Ok(())
}

/// Linear model forward pass `N = Z theta^T`, shape `S x Fo`.
pub fn linear_forward(z: &Matrix, p: &LinearParams) -> Result<Logits> {
    check_linear_dims("linear_forward", z, p)?;
    z.matmul(&p.theta.transpose())
}

/// Quadratic model forward pass `N = Z theta Z^T`, shape `S x S`.
pub fn quad_forward(z: &Matrix, p: &QuadParams) -> Result<Logits> {
    if z.cols() != p.dim() {
        return Err(Error::dim(
            "quad_forward",
            format!(
                "Z has {} feature columns but theta is {1}x{1}",
                z.cols(),
                p.dim()
            ),
        ));
    }
    z.matmul(p.theta())?.matmul(&z.transpose())
}

/// Point-wise cross-entropy of one sample:
/// `l = <1, LSE_i(N)> - <C, N>`, nonnegative for column-stochastic `C`.
pub fn pointwise_ce(n: &Logits, c: &LabelMatrix) -> Result<f64> {
    check_labels("pointwise_ce", n.rows(), n.cols(), c)?;
    let lse_total: f64 = lse_seq(n).iter().sum();
    Ok(lse_total - frobenius_inner(c.values(), n)?)
}

/// Cross-attention `CA(Z, theta) = sigma_i(Z theta^T) theta` with queries
/// `Z` and key-value pairs `theta`; shape `S x Fi`. Columns of the softmax
/// sum to one, so `1^T CA = 1^T theta`.
pub fn cross_attention(z: &Matrix, p: &LinearParams) -> Result<Matrix> {
    check_linear_dims("cross_attention", z, p)?;
    softmax_seq(&z.matmul(&p.theta.transpose())?).matmul(&p.theta)
}

/// Self-attention `SA(X) = sigma_i(X X^T) X`; shape equals `X`'s.
pub fn self_attention(x: &Matrix) -> Matrix {
    let logits = x
        .matmul(&x.transpose())
        .expect("X X^T is always shape-compatible");
    softmax_seq(&logits)
        .matmul(x)
        .expect("sigma(X X^T) X is always shape-compatible")
}

/// Feature gradient of the point-wise cross-entropy for the linear model:
/// `d_Z l = CA(Z, theta) - C theta`. Every column sums to zero.
pub fn grad_z_linear(z: &Matrix, p: &LinearParams, c: &LabelMatrix) -> Result<Matrix> {
    check_linear_dims("grad_z_linear", z, p)?;
    check_labels("grad_z_linear", z.rows(), p.out_dim(), c)?;
    cross_attention(z, p)?.sub(&c.values().matmul(&p.theta)?)
}

/// Feature gradient of the point-wise cross-entropy for the quadratic
/// model, in the requested printed form. See [`GradForm`].
pub fn grad_z_quad(z: &Matrix, p: &QuadParams, c: &LabelMatrix, form: GradForm) -> Result<Matrix> {
    if z.cols() != p.dim() {
        return Err(Error::dim(
            "grad_z_quad",
            format!(
                "Z has {} feature columns, theta is {}x{}",
                z.cols(),
                p.dim(),
                p.dim()
            ),
        ));
    }
    check_labels("grad_z_quad", z.rows(), z.rows(), c)?;
    let sigma = softmax_seq(&quad_forward(z, p)?);
    let z_theta = z.matmul(p.theta())?;
    let c_sym = c.values().add(&c.values().transpose())?;
    let attract = match form {
        GradForm::Exact => sigma.add(&sigma.transpose())?.matmul(&z_theta)?,
        GradForm::PaperLiteral => sigma.matmul(&z_theta)?.scale(2.0),
    };
    attract.sub(&c_sym.matmul(&z_theta)?)
}

/// Parameter gradient of the point-wise cross-entropy for the linear
/// model: `(sigma_i(Z theta^T) - C)^T Z`, shape `Fo x Fi`.
pub fn grad_theta_linear(z: &Matrix, p: &LinearParams, c: &LabelMatrix) -> Result<Matrix> {
    check_linear_dims("grad_theta_linear", z, p)?;
    check_labels("grad_theta_linear", z.rows(), p.out_dim(), c)?;
    let sigma = softmax_seq(&linear_forward(z, p)?);
    sigma.sub(c.values())?.transpose().matmul(z)
}

/// Norm of the first-order optimality defect `CA(Z, theta) - C theta`.
/// Zero exactly when cross-attention equals the theta-weighted labels;
/// equal by definition to the Frobenius norm of [`grad_z_linear`].
pub fn fixed_point_residual(z: &Matrix, p: &LinearParams, c: &LabelMatrix) -> Result<f64> {
    Ok(grad_z_linear(z, p, c)?.frobenius_norm())
}
