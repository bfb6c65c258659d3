//! Gradient flow of the point-wise cross-entropy and its split block
//! steppers, plus layer stacks, trajectory recording, and the empirical
//! convergence-order study.
//!
//! The flow is `Z' = -d_Z l(Z, theta)`; one split block applies the
//! attention part of the gradient, then the label part, each scaled by a
//! step size `h`. At `h = 1` the block steps reproduce the attention +
//! residual transformer updates exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax_seq, Matrix};
use crate::models::{
    cross_attention, grad_z_linear, grad_z_quad, linear_forward, pointwise_ce, quad_forward,
    self_attention, GradForm, LabelMatrix, LinearParams, QuadParams,
};

/// A model with its parameters: the linear head `Z theta^T` or the
/// quadratic form `Z theta Z^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Linear(LinearParams),
    Quad(QuadParams),
}

impl Model {
    /// Feature gradient of the point-wise cross-entropy. The quadratic
    /// model always uses the exact (finite-difference-verified) form here;
    /// the literal printed form only enters through block steps.
    pub fn grad_z(&self, z: &Matrix, c: &LabelMatrix) -> Result<Matrix> {
        match self {
            Model::Linear(p) => grad_z_linear(z, p, c),
            Model::Quad(p) => grad_z_quad(z, p, c, GradForm::Exact),
        }
    }

    pub fn ce(&self, z: &Matrix, c: &LabelMatrix) -> Result<f64> {
        let logits = match self {
            Model::Linear(p) => linear_forward(z, p)?,
            Model::Quad(p) => quad_forward(z, p)?,
        };
        pointwise_ce(&logits, c)
    }
}

/// Right-hand side of the gradient flow: `-d_Z l(Z, theta)`.
pub fn flow_rhs(z: &Matrix, model: &Model, c: &LabelMatrix) -> Result<Matrix> {
    Ok(model.grad_z(z, c)?.scale(-1.0))
}

/// Central-difference estimate of `d/dt l(Z(t))` along the flow direction,
/// for checking the dissipation rate `-|d_Z l|_F^2` without trusting the
/// analytic gradient twice.
pub fn ce_rate_along_flow(z: &Matrix, model: &Model, c: &LabelMatrix, delta: f64) -> Result<f64> {
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::param(
            "ce_rate_along_flow",
            format!("delta must be positive and finite, got {delta}"),
        ));
    }
    let v = flow_rhs(z, model, c)?;
    let plus = model.ce(&z.add_scaled(&v, delta)?, c)?;
    let minus = model.ce(&z.add_scaled(&v, -delta)?, c)?;
    let rate = (plus - minus) / (2.0 * delta);
    if rate.is_finite() {
        Ok(rate)
    } else {
        Err(Error::NonFinite {
            op: "ce_rate_along_flow",
            detail: "probe loss is non-finite".into(),
        })
    }
}

/// Time integrators for the continuous flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMethod {
    Euler,
    Rk4,
}

/// How a recorded trajectory was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMethod {
    Euler,
    Rk4,
    SplitLinear,
    SplitQuad,
}

impl From<FlowMethod> for TrajectoryMethod {
    fn from(m: FlowMethod) -> Self {
        match m {
            FlowMethod::Euler => TrajectoryMethod::Euler,
            FlowMethod::Rk4 => TrajectoryMethod::Rk4,
        }
    }
}

/// One recorded state along a trajectory. `residual` is the norm of the
/// first-order optimality defect, which for these models coincides with
/// `grad_norm` computed from the exact gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub time: f64,
    pub z: Matrix,
    pub ce: f64,
    pub grad_norm: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: TrajectoryMethod,
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn initial(&self) -> &TrajectoryRecord {
        self.records.first().expect("trajectories are nonempty")
    }

    pub fn last(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectories are nonempty")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn eval_record(
    model: &Model,
    z: &Matrix,
    c: &LabelMatrix,
    step: usize,
    time: f64,
) -> Result<Option<TrajectoryRecord>> {
    if !z.all_finite() {
        return Ok(None);
    }
    let grad = model.grad_z(z, c)?;
    let ce = model.ce(z, c)?;
    if !ce.is_finite() || !grad.all_finite() {
        return Ok(None);
    }
    let grad_norm = grad.frobenius_norm();
    Ok(Some(TrajectoryRecord {
        step,
        time,
        z: z.clone(),
        ce,
        grad_norm,
        residual: grad_norm,
    }))
}

fn check_step_size(op: &'static str, h: f64) -> Result<()> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::param(
            op,
            format!("step size must be positive and finite, got {h}"),
        ));
    }
    Ok(())
}

/// Integrate the gradient flow from `z0` for `steps` steps of size `h`,
/// recording every state. A non-finite state or loss aborts with the valid
/// prefix attached to the error.
pub fn integrate_flow(
    z0: &Matrix,
    model: &Model,
    c: &LabelMatrix,
    h: f64,
    steps: usize,
    method: FlowMethod,
) -> Result<Trajectory> {
    check_step_size("integrate_flow", h)?;
    if steps == 0 {
        return Err(Error::param("integrate_flow", "need at least one step"));
    }
    let mut records = Vec::with_capacity(steps + 1);
    match eval_record(model, z0, c, 0, 0.0)? {
        Some(r) => records.push(r),
        None => {
            return Err(Error::param(
                "integrate_flow",
                "initial state has non-finite loss or gradient",
            ))
        }
    }
    let mut z = z0.clone();
    for k in 1..=steps {
        z = match method {
            FlowMethod::Euler => {
                let rhs = flow_rhs(&z, model, c)?;
                z.add_scaled(&rhs, h)?
            }
            FlowMethod::Rk4 => {
                let k1 = flow_rhs(&z, model, c)?;
                let k2 = flow_rhs(&z.add_scaled(&k1, h / 2.0)?, model, c)?;
                let k3 = flow_rhs(&z.add_scaled(&k2, h / 2.0)?, model, c)?;
                let k4 = flow_rhs(&z.add_scaled(&k3, h)?, model, c)?;
                let incr = k1.add_scaled(&k2, 2.0)?.add_scaled(&k3, 2.0)?.add(&k4)?;
                z.add_scaled(&incr, h / 6.0)?
            }
        };
        match eval_record(model, &z, c, k, k as f64 * h)? {
            Some(r) => records.push(r),
            None => {
                return Err(Error::Diverged {
                    step: k,
                    last: Box::new(Trajectory {
                        method: method.into(),
                        records,
                    }),
                })
            }
        }
    }
    Ok(Trajectory {
        method: method.into(),
        records,
    })
}

fn linear_attention_substep(z: &Matrix, theta_a: &LinearParams, h: f64) -> Result<Matrix> {
    z.add_scaled(&cross_attention(z, theta_a)?, -h)
}

fn quad_attention_substep(z: &Matrix, p_a: &QuadParams, h: f64, form: GradForm) -> Result<Matrix> {
    match form {
        GradForm::PaperLiteral => {
            let term = self_attention(&z.matmul(p_a.phi())?).matmul(&p_a.phi().transpose())?;
            z.add_scaled(&term, -2.0 * h)
        }
        GradForm::Exact => {
            let sigma = softmax_seq(&quad_forward(z, p_a)?);
            let term = sigma
                .add(&sigma.transpose())?
                .matmul(&z.matmul(p_a.theta())?)?;
            z.add_scaled(&term, -h)
        }
    }
}

/// One split block of the linear model: `Z <- Z - h CA(Z, theta_a)`, then
/// `Z <- Z + h C theta_b`. With `h = 1` this is the verbatim two-line
/// attention + label update.
pub fn block_step_linear(
    z: &Matrix,
    theta_a: &LinearParams,
    theta_b: &LinearParams,
    c: &LabelMatrix,
    h: f64,
) -> Result<Matrix> {
    check_step_size("block_step_linear", h)?;
    if c.rows() != z.rows() || c.cols() != theta_b.out_dim() {
        return Err(Error::dim(
            "block_step_linear",
            format!(
                "labels are {}x{}, state has {} rows, theta_b outputs {}",
                c.rows(),
                c.cols(),
                z.rows(),
                theta_b.out_dim()
            ),
        ));
    }
    if theta_b.in_dim() != z.cols() {
        return Err(Error::dim(
            "block_step_linear",
            format!(
                "theta_b maps into {} features but state has {}",
                theta_b.in_dim(),
                z.cols()
            ),
        ));
    }
    let z_half = linear_attention_substep(z, theta_a, h)?;
    z_half.add_scaled(&c.values().matmul(&theta_b.theta)?, h)
}

/// One split block of the quadratic model:
/// `Z <- Z - h * 2 SA(Z phi) phi^T` (literal form) or
/// `Z <- Z - h (sigma + sigma^T) Z theta` (exact form), then
/// `Z <- Z + h (C + C^T) Z theta_b`. With `h = 1` and the literal form
/// this is the verbatim self-attention + residual update.
pub fn block_step_quad(
    z: &Matrix,
    p_a: &QuadParams,
    theta_b: &Matrix,
    c: &LabelMatrix,
    h: f64,
    form: GradForm,
) -> Result<Matrix> {
    check_step_size("block_step_quad", h)?;
    if z.cols() != p_a.dim() {
        return Err(Error::dim(
            "block_step_quad",
            format!(
                "state has {} features, phi is {}x{}",
                z.cols(),
                p_a.dim(),
                p_a.dim()
            ),
        ));
    }
    if (c.rows(), c.cols()) != (z.rows(), z.rows()) {
        return Err(Error::dim(
            "block_step_quad",
            format!(
                "labels are {}x{} but must be square of the sequence length {}",
                c.rows(),
                c.cols(),
                z.rows()
            ),
        ));
    }
    if theta_b.shape() != (z.cols(), z.cols()) {
        return Err(Error::dim(
            "block_step_quad",
            format!(
                "theta_b is {}x{} but state has {} features",
                theta_b.rows(),
                theta_b.cols(),
                z.cols()
            ),
        ));
    }
    let z_half = quad_attention_substep(z, p_a, h, form)?;
    let c_sym = c.values().add(&c.values().transpose())?;
    let term = c_sym.matmul(&z_half)?.matmul(theta_b)?;
    z_half.add_scaled(&term, h)
}

/// Per-layer parameters of a linear block: `attn` drives the attention
/// sub-step and the layer's loss evaluation, `label` the label sub-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub attn: LinearParams,
    pub label: LinearParams,
}

/// Per-layer parameters of a quadratic block. `label` is the second
/// sub-step matrix; `form` selects the attraction term of the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadLayer {
    pub attn: QuadParams,
    pub label: Matrix,
    pub form: GradForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackLayers {
    Linear(Vec<LinearLayer>),
    Quad(Vec<QuadLayer>),
}

/// A depth-first list of block layers sharing one step size. Shapes are
/// validated once at construction so propagation cannot fail midway on
/// dimension errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerStackRepr", into = "LayerStackRepr")]
pub struct LayerStack {
    h: f64,
    layers: StackLayers,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerStackRepr {
    h: f64,
    layers: StackLayers,
}

impl TryFrom<LayerStackRepr> for LayerStack {
    type Error = Error;
    fn try_from(r: LayerStackRepr) -> Result<Self> {
        LayerStack::new(r.h, r.layers)
    }
}

impl From<LayerStack> for LayerStackRepr {
    fn from(s: LayerStack) -> Self {
        LayerStackRepr {
            h: s.h,
            layers: s.layers,
        }
    }
}

impl LayerStack {
    pub fn new(h: f64, layers: StackLayers) -> Result<Self> {
        check_step_size("LayerStack::new", h)?;
        match &layers {
            StackLayers::Linear(list) => {
                let first = list
                    .first()
                    .ok_or_else(|| Error::param("LayerStack::new", "empty stack"))?;
                let shape = first.attn.theta.shape();
                for (idx, layer) in list.iter().enumerate() {
                    if layer.attn.theta.shape() != shape || layer.label.theta.shape() != shape {
                        return Err(Error::dim(
                            "LayerStack::new",
                            format!("layer {idx} parameter shape differs from layer 0"),
                        ));
                    }
                }
            }
            StackLayers::Quad(list) => {
                let first = list
                    .first()
                    .ok_or_else(|| Error::param("LayerStack::new", "empty stack"))?;
                let dim = first.attn.dim();
                for (idx, layer) in list.iter().enumerate() {
                    if layer.attn.dim() != dim || layer.label.shape() != (dim, dim) {
                        return Err(Error::dim(
                            "LayerStack::new",
                            format!("layer {idx} parameter shape differs from layer 0"),
                        ));
                    }
                }
            }
        }
        Ok(LayerStack { h, layers })
    }

    /// Linear stack with one shared `theta` for both sub-steps of every layer.
    pub fn linear_shared(theta: Matrix, depth: usize, h: f64) -> Result<Self> {
        let p = LinearParams::new(theta);
        let layers = (0..depth)
            .map(|_| LinearLayer {
                attn: p.clone(),
                label: p.clone(),
            })
            .collect();
        LayerStack::new(h, StackLayers::Linear(layers))
    }

    /// Quadratic stack sharing one `phi` (and `theta = phi phi^T`) across
    /// all layers and both sub-steps.
    pub fn quad_shared(phi: Matrix, depth: usize, h: f64, form: GradForm) -> Result<Self> {
        let p = QuadParams::new(phi)?;
        let theta = p.theta().clone();
        let layers = (0..depth)
            .map(|_| QuadLayer {
                attn: p.clone(),
                label: theta.clone(),
                form,
            })
            .collect();
        LayerStack::new(h, StackLayers::Quad(layers))
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn layers(&self) -> &StackLayers {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        match &self.layers {
            StackLayers::Linear(l) => l.len(),
            StackLayers::Quad(l) => l.len(),
        }
    }

    /// Loss-evaluation model for the record at `record_idx`: the producing
    /// layer's attention parameters (layer 0's for the initial record).
    fn eval_model(&self, record_idx: usize) -> Model {
        let layer = record_idx.saturating_sub(1);
        match &self.layers {
            StackLayers::Linear(l) => Model::Linear(l[layer].attn.clone()),
            StackLayers::Quad(l) => Model::Quad(l[layer].attn.clone()),
        }
    }

    fn step(
        &self,
        z: &Matrix,
        layer: usize,
        c: &LabelMatrix,
        mode: PropagationMode,
    ) -> Result<Matrix> {
        match (&self.layers, mode) {
            (StackLayers::Linear(l), PropagationMode::WithLabels) => {
                block_step_linear(z, &l[layer].attn, &l[layer].label, c, self.h)
            }
            (StackLayers::Linear(l), PropagationMode::LabelFree) => {
                linear_attention_substep(z, &l[layer].attn, self.h)
            }
            (StackLayers::Quad(l), PropagationMode::WithLabels) => {
                block_step_quad(z, &l[layer].attn, &l[layer].label, c, self.h, l[layer].form)
            }
            (StackLayers::Quad(l), PropagationMode::LabelFree) => {
                quad_attention_substep(z, &l[layer].attn, self.h, l[layer].form)
            }
        }
    }

    fn method(&self) -> TrajectoryMethod {
        match &self.layers {
            StackLayers::Linear(_) => TrajectoryMethod::SplitLinear,
            StackLayers::Quad(_) => TrajectoryMethod::SplitQuad,
        }
    }
}

/// Whether the label sub-step of each block runs. Training-time
/// propagation consumes the labels; label-free evaluation replaces the
/// label sub-step with identity, leaving pure attention dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    WithLabels,
    LabelFree,
}

/// Propagate `z0` through every layer of the stack, recording the state
/// after each block. Loss statistics of each record are evaluated under
/// the producing layer's own attention parameters.
pub fn run_blocks(z0: &Matrix, stack: &LayerStack, c: &LabelMatrix) -> Result<Trajectory> {
    let mut records = Vec::with_capacity(stack.depth() + 1);
    match eval_record(&stack.eval_model(0), z0, c, 0, 0.0)? {
        Some(r) => records.push(r),
        None => {
            return Err(Error::param(
                "run_blocks",
                "initial state has non-finite loss or gradient",
            ))
        }
    }
    let mut z = z0.clone();
    for layer in 0..stack.depth() {
        z = stack.step(&z, layer, c, PropagationMode::WithLabels)?;
        let k = layer + 1;
        match eval_record(&stack.eval_model(k), &z, c, k, k as f64 * stack.h())? {
            Some(r) => records.push(r),
            None => {
                return Err(Error::Diverged {
                    step: k,
                    last: Box::new(Trajectory {
                        method: stack.method(),
                        records,
                    }),
                })
            }
        }
    }
    Ok(Trajectory {
        method: stack.method(),
        records,
    })
}

/// Final state of block propagation without trajectory recording; the fast
/// path for training loops and label-free evaluation.
pub fn propagate(
    z0: &Matrix,
    stack: &LayerStack,
    c: &LabelMatrix,
    mode: PropagationMode,
) -> Result<Matrix> {
    let mut z = z0.clone();
    for layer in 0..stack.depth() {
        z = stack.step(&z, layer, c, mode)?;
        if !z.all_finite() {
            return Err(Error::NonFinite {
                op: "propagate",
                detail: format!("state non-finite after layer {layer}"),
            });
        }
    }
    Ok(z)
}

/// Result of the convergence-order study: `(h, error)` pairs and the
/// least-squares slope of `log error` against `log h`, `None` when any
/// error vanishes (order undefined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStudy {
    pub points: Vec<(f64, f64)>,
    pub slope: Option<f64>,
}

fn steps_for(op: &'static str, t: f64, h: f64) -> Result<usize> {
    let raw = t / h;
    let steps = raw.round();
    if steps < 1.0 || (steps * h - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::param(
            op,
            format!("horizon {t} is not an integer multiple of step {h}"),
        ));
    }
    Ok(steps as usize)
}

/// Compare split block stepping at each `h` against a fine rk4 reference
/// of the same flow at horizon `t`. `h_values` must be positive and
/// strictly descending; each must divide `t` within rounding. The split
/// uses shared parameters in both sub-steps (exact form for the quadratic
/// model), matching the flow being referenced.
pub fn convergence_order_study(
    z0: &Matrix,
    model: &Model,
    c: &LabelMatrix,
    h_values: &[f64],
    t: f64,
) -> Result<OrderStudy> {
    if h_values.is_empty() {
        return Err(Error::param("convergence_order_study", "no step sizes"));
    }
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::param(
            "convergence_order_study",
            format!("horizon must be positive and finite, got {t}"),
        ));
    }
    for pair in h_values.windows(2) {
        if pair[1] >= pair[0] {
            return Err(Error::param(
                "convergence_order_study",
                "step sizes must be strictly descending",
            ));
        }
    }
    for &h in h_values {
        check_step_size("convergence_order_study", h)?;
    }
    let h_min = *h_values.last().unwrap();
    let steps_min = steps_for("convergence_order_study", t, h_min)?;
    let h_ref = h_min / 20.0;
    let reference = integrate_flow(z0, model, c, h_ref, steps_min * 20, FlowMethod::Rk4)?;
    let z_ref = &reference.last().z;

    let mut points = Vec::with_capacity(h_values.len());
    for &h in h_values {
        let steps = steps_for("convergence_order_study", t, h)?;
        let mut z = z0.clone();
        for _ in 0..steps {
            z = match model {
                Model::Linear(p) => block_step_linear(&z, p, p, c, h)?,
                Model::Quad(p) => block_step_quad(&z, p, p.theta(), c, h, GradForm::Exact)?,
            };
            if !z.all_finite() {
                return Err(Error::NonFinite {
                    op: "convergence_order_study",
                    detail: format!("split trajectory diverged at h = {h}"),
                });
            }
        }
        points.push((h, z.sub(z_ref)?.frobenius_norm()));
    }

    let slope = if points.len() >= 2 && points.iter().all(|&(_, e)| e > 0.0) {
        let xs: Vec<f64> = points.iter().map(|&(h, _)| h.ln()).collect();
        let ys: Vec<f64> = points.iter().map(|&(_, e)| e.ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let var: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
        Some(cov / var)
    } else {
        None
    };
    Ok(OrderStudy { points, slope })
}
