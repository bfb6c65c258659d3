//! Two-stage optimization: inner feature propagation through a block
//! stack, outer full-batch gradient descent on the stack parameters and a
//! linear readout against the empirical mean cross-entropy, plus the
//! classification readout and its metrics.
//!
//! Parameter gradients are central finite differences over every free
//! coordinate (shared matrices are perturbed once, so tied layers are
//! differentiated jointly); the readout gradient has an analytic form that
//! the training loop uses instead.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate, LayerStack, PropagationMode, StackLayers};
use crate::dynamics::{LinearLayer, QuadLayer};
use crate::error::{Error, Result};
use crate::linalg::{argmax_per_column, Matrix};
use crate::models::{
    grad_theta_linear, linear_forward, pointwise_ce, GradForm, LabelMatrix, LinearParams,
    QuadParams,
};

/// Shared experiment dimensions: sequence length, feature width, output
/// count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub s: usize,
    pub fi: usize,
    pub fo: usize,
}

/// One training sample: initial features and their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z0: Matrix,
    pub c: LabelMatrix,
}

/// Homogeneous list of samples with the dimensions and the seed they were
/// drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct Dataset {
    samples: Vec<Sample>,
    dims: Dims,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRepr {
    samples: Vec<Sample>,
    dims: Dims,
    seed: u64,
}

impl TryFrom<DatasetRepr> for Dataset {
    type Error = Error;
    fn try_from(r: DatasetRepr) -> Result<Self> {
        Dataset::new(r.samples, r.dims, r.seed)
    }
}

impl From<Dataset> for DatasetRepr {
    fn from(d: Dataset) -> Self {
        DatasetRepr {
            samples: d.samples,
            dims: d.dims,
            seed: d.seed,
        }
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, dims: Dims, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("Dataset::new", "no samples"));
        }
        for (idx, sample) in samples.iter().enumerate() {
            if sample.z0.shape() != (dims.s, dims.fi)
                || (sample.c.rows(), sample.c.cols()) != (dims.s, dims.fo)
            {
                return Err(Error::dim(
                    "Dataset::new",
                    format!(
                        "sample {idx} has shapes {:?} / {:?}, expected ({}, {}) / ({}, {})",
                        sample.z0.shape(),
                        (sample.c.rows(), sample.c.cols()),
                        dims.s,
                        dims.fi,
                        dims.s,
                        dims.fo
                    ),
                ));
            }
        }
        Ok(Dataset {
            samples,
            dims,
            seed,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Free stack parameters. `Shared` variants tie one matrix across all
/// layers (and both sub-steps); `Free` variants give each layer its own
/// `(attention, label)` pair. Depth 0 means no propagation (pure
/// multinomial regression on the initial features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackParams {
    LinearShared {
        theta: Matrix,
        depth: usize,
    },
    LinearFree {
        layers: Vec<(Matrix, Matrix)>,
    },
    QuadShared {
        phi: Matrix,
        depth: usize,
        form: GradForm,
    },
    QuadFree {
        layers: Vec<(Matrix, Matrix)>,
        form: GradForm,
    },
}

/// Everything the outer optimizer moves: stack parameters plus the
/// independent linear readout used for classification and the global loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableParams {
    pub stack: StackParams,
    pub readout: LinearParams,
}

/// Address of one free scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Coord {
    site: Site,
    row: usize,
    col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    Shared,
    Attn(usize),
    Label(usize),
    Readout,
}

fn full_coords(site: Site, m: &Matrix, out: &mut Vec<Coord>) {
    for row in 0..m.rows() {
        for col in 0..m.cols() {
            out.push(Coord { site, row, col });
        }
    }
}

fn lower_tri_coords(site: Site, m: &Matrix, out: &mut Vec<Coord>) {
    for row in 0..m.rows() {
        for col in 0..=row.min(m.cols() - 1) {
            out.push(Coord { site, row, col });
        }
    }
}

impl TrainableParams {
    pub fn depth(&self) -> usize {
        match &self.stack {
            StackParams::LinearShared { depth, .. } | StackParams::QuadShared { depth, .. } => {
                *depth
            }
            StackParams::LinearFree { layers } => layers.len(),
            StackParams::QuadFree { layers, .. } => layers.len(),
        }
    }

    /// The propagation stack at step size `h`, or `None` at depth 0.
    pub fn to_stack(&self, h: f64) -> Result<Option<LayerStack>> {
        if self.depth() == 0 {
            return Ok(None);
        }
        let layers = match &self.stack {
            StackParams::LinearShared { theta, depth } => {
                let p = LinearParams::new(theta.clone());
                StackLayers::Linear(
                    (0..*depth)
                        .map(|_| LinearLayer {
                            attn: p.clone(),
                            label: p.clone(),
                        })
                        .collect(),
                )
            }
            StackParams::LinearFree { layers } => StackLayers::Linear(
                layers
                    .iter()
                    .map(|(attn, label)| LinearLayer {
                        attn: LinearParams::new(attn.clone()),
                        label: LinearParams::new(label.clone()),
                    })
                    .collect(),
            ),
            StackParams::QuadShared { phi, depth, form } => {
                let p = QuadParams::new(phi.clone())?;
                let label = p.theta().clone();
                StackLayers::Quad(
                    (0..*depth)
                        .map(|_| QuadLayer {
                            attn: p.clone(),
                            label: label.clone(),
                            form: *form,
                        })
                        .collect(),
                )
            }
            StackParams::QuadFree { layers, form } => StackLayers::Quad(
                layers
                    .iter()
                    .map(|(phi, label)| {
                        Ok(QuadLayer {
                            attn: QuadParams::new(phi.clone())?,
                            label: label.clone(),
                            form: *form,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Some(LayerStack::new(h, layers)?))
    }

    /// Free stack coordinates in a fixed order: layers in depth order,
    /// attention before label within a layer, row-major within a matrix;
    /// square-root matrices contribute their lower triangle only.
    fn stack_coords(&self) -> Vec<Coord> {
        let mut out = Vec::new();
        match &self.stack {
            StackParams::LinearShared { theta, depth } => {
                if *depth > 0 {
                    full_coords(Site::Shared, theta, &mut out);
                }
            }
            StackParams::LinearFree { layers } => {
                for (idx, (attn, label)) in layers.iter().enumerate() {
                    full_coords(Site::Attn(idx), attn, &mut out);
                    full_coords(Site::Label(idx), label, &mut out);
                }
            }
            StackParams::QuadShared { phi, depth, .. } => {
                if *depth > 0 {
                    lower_tri_coords(Site::Shared, phi, &mut out);
                }
            }
            StackParams::QuadFree { layers, .. } => {
                for (idx, (phi, label)) in layers.iter().enumerate() {
                    lower_tri_coords(Site::Attn(idx), phi, &mut out);
                    full_coords(Site::Label(idx), label, &mut out);
                }
            }
        }
        out
    }

    fn all_coords(&self) -> Vec<Coord> {
        let mut out = self.stack_coords();
        full_coords(Site::Readout, &self.readout.theta, &mut out);
        out
    }

    fn site_matrix(&self, site: Site) -> &Matrix {
        match (site, &self.stack) {
            (Site::Shared, StackParams::LinearShared { theta, .. }) => theta,
            (Site::Shared, StackParams::QuadShared { phi, .. }) => phi,
            (Site::Attn(l), StackParams::LinearFree { layers }) => &layers[l].0,
            (Site::Label(l), StackParams::LinearFree { layers }) => &layers[l].1,
            (Site::Attn(l), StackParams::QuadFree { layers, .. }) => &layers[l].0,
            (Site::Label(l), StackParams::QuadFree { layers, .. }) => &layers[l].1,
            (Site::Readout, _) => &self.readout.theta,
            _ => unreachable!("coordinate sites always match the variant they came from"),
        }
    }

    fn with_site_matrix(&self, site: Site, m: Matrix) -> TrainableParams {
        let mut out = self.clone();
        match (site, &mut out.stack) {
            (Site::Shared, StackParams::LinearShared { theta, .. }) => *theta = m,
            (Site::Shared, StackParams::QuadShared { phi, .. }) => *phi = m,
            (Site::Attn(l), StackParams::LinearFree { layers }) => layers[l].0 = m,
            (Site::Label(l), StackParams::LinearFree { layers }) => layers[l].1 = m,
            (Site::Attn(l), StackParams::QuadFree { layers, .. }) => layers[l].0 = m,
            (Site::Label(l), StackParams::QuadFree { layers, .. }) => layers[l].1 = m,
            (Site::Readout, _) => out.readout.theta = m,
            _ => unreachable!("coordinate sites always match the variant they came from"),
        }
        out
    }

    fn with_coord(&self, coord: Coord, value: f64) -> TrainableParams {
        let src = self.site_matrix(coord.site);
        let m = Matrix::from_fn(src.rows(), src.cols(), |i, j| {
            if (i, j) == (coord.row, coord.col) {
                value
            } else {
                src.get(i, j)
            }
        });
        self.with_site_matrix(coord.site, m)
    }

    fn bump(&self, coord: Coord, delta: f64) -> TrainableParams {
        let current = self.site_matrix(coord.site).get(coord.row, coord.col);
        self.with_coord(coord, current + delta)
    }

    fn zeros_like(&self) -> TrainableParams {
        let mut out = self.clone();
        let sites: Vec<Site> = match &self.stack {
            StackParams::LinearShared { .. } | StackParams::QuadShared { .. } => {
                vec![Site::Shared]
            }
            StackParams::LinearFree { layers } => (0..layers.len())
                .flat_map(|l| [Site::Attn(l), Site::Label(l)])
                .collect(),
            StackParams::QuadFree { layers, .. } => (0..layers.len())
                .flat_map(|l| [Site::Attn(l), Site::Label(l)])
                .collect(),
        };
        for site in sites.into_iter().chain([Site::Readout]) {
            let m = self.site_matrix(site);
            out = out.with_site_matrix(site, Matrix::zeros(m.rows(), m.cols()));
        }
        out
    }

    fn coord_name(&self, coord: Coord) -> String {
        match coord.site {
            Site::Shared => format!("stack.shared({}, {})", coord.row, coord.col),
            Site::Attn(l) => format!("stack[{l}].attn({}, {})", coord.row, coord.col),
            Site::Label(l) => format!("stack[{l}].label({}, {})", coord.row, coord.col),
            Site::Readout => format!("readout({}, {})", coord.row, coord.col),
        }
    }

    /// `self + k * other`, entrywise over every parameter matrix. The
    /// structures must match exactly.
    pub fn axpy(&self, other: &TrainableParams, k: f64) -> Result<TrainableParams> {
        let mismatch = || Error::param("TrainableParams::axpy", "parameter structures differ");
        let stack = match (&self.stack, &other.stack) {
            (
                StackParams::LinearShared { theta, depth },
                StackParams::LinearShared {
                    theta: g,
                    depth: d2,
                },
            ) if depth == d2 => StackParams::LinearShared {
                theta: theta.add_scaled(g, k)?,
                depth: *depth,
            },
            (StackParams::LinearFree { layers }, StackParams::LinearFree { layers: g })
                if layers.len() == g.len() =>
            {
                StackParams::LinearFree {
                    layers: layers
                        .iter()
                        .zip(g)
                        .map(|((a, b), (ga, gb))| Ok((a.add_scaled(ga, k)?, b.add_scaled(gb, k)?)))
                        .collect::<Result<Vec<_>>>()?,
                }
            }
            (
                StackParams::QuadShared { phi, depth, form },
                StackParams::QuadShared {
                    phi: g,
                    depth: d2,
                    form: f2,
                },
            ) if depth == d2 && form == f2 => StackParams::QuadShared {
                phi: phi.add_scaled(g, k)?,
                depth: *depth,
                form: *form,
            },
            (
                StackParams::QuadFree { layers, form },
                StackParams::QuadFree {
                    layers: g,
                    form: f2,
                },
            ) if layers.len() == g.len() && form == f2 => StackParams::QuadFree {
                layers: layers
                    .iter()
                    .zip(g)
                    .map(|((a, b), (ga, gb))| Ok((a.add_scaled(ga, k)?, b.add_scaled(gb, k)?)))
                    .collect::<Result<Vec<_>>>()?,
                form: *form,
            },
            _ => return Err(mismatch()),
        };
        Ok(TrainableParams {
            stack,
            readout: LinearParams::new(self.readout.theta.add_scaled(&other.readout.theta, k)?),
        })
    }
}

fn mean_ce(data: &Dataset, stack: Option<&LayerStack>, readout: &LinearParams) -> Result<f64> {
    let mut total = 0.0;
    for (index, sample) in data.samples().iter().enumerate() {
        let wrap = |e: Error| Error::Sample {
            index,
            source: Box::new(e),
        };
        let z_final = match stack {
            Some(s) => {
                propagate(&sample.z0, s, &sample.c, PropagationMode::WithLabels).map_err(wrap)?
            }
            None => sample.z0.clone(),
        };
        let ce = linear_forward(&z_final, readout)
            .and_then(|n| pointwise_ce(&n, &sample.c))
            .map_err(wrap)?;
        total += ce;
    }
    let mean = total / data.len() as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::NonFinite {
            op: "global_ce",
            detail: "mean cross-entropy is non-finite".into(),
        })
    }
}

/// Empirical mean of the point-wise cross-entropy after propagating every
/// sample through the stack and applying the readout.
pub fn global_ce(data: &Dataset, stack: &LayerStack, readout: &LinearParams) -> Result<f64> {
    mean_ce(data, Some(stack), readout)
}

/// [`global_ce`] driven by trainable parameters; handles depth 0 (no
/// propagation) and builds the stack once.
pub fn global_ce_params(data: &Dataset, params: &TrainableParams, h: f64) -> Result<f64> {
    let stack = params.to_stack(h)?;
    mean_ce(data, stack.as_ref(), &params.readout)
}

fn fd_over_coords(
    data: &Dataset,
    params: &TrainableParams,
    h: f64,
    step: f64,
    coords: &[Coord],
) -> Result<TrainableParams> {
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::param(
            "fd_param_gradient",
            format!("step must be positive and finite, got {step}"),
        ));
    }
    let mut grad = params.zeros_like();
    for &coord in coords {
        let probe = |delta: f64| -> Result<f64> {
            global_ce_params(data, &params.bump(coord, delta), h).map_err(|e| {
                if e.is_numerical() {
                    Error::NonFinite {
                        op: "fd_param_gradient",
                        detail: format!("probing {}: {e}", params.coord_name(coord)),
                    }
                } else {
                    e
                }
            })
        };
        let g = (probe(step)? - probe(-step)?) / (2.0 * step);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "fd_param_gradient",
                detail: format!("difference quotient at {}", params.coord_name(coord)),
            });
        }
        grad = grad.with_coord(coord, g);
    }
    Ok(grad)
}

/// Central finite differences of [`global_ce_params`] over every free
/// parameter coordinate (stack and readout), in the documented coordinate
/// order. Shared matrices are perturbed once so tied layers are
/// differentiated jointly.
pub fn fd_param_gradient(
    data: &Dataset,
    params: &TrainableParams,
    h: f64,
    step: f64,
) -> Result<TrainableParams> {
    fd_over_coords(data, params, h, step, &params.all_coords())
}

/// Exact gradient of [`global_ce_params`] with respect to the readout:
/// the mean over samples of `(sigma - C)^T Z_final`. Valid because the
/// readout does not participate in propagation.
pub fn analytic_readout_gradient(
    data: &Dataset,
    params: &TrainableParams,
    h: f64,
) -> Result<LinearParams> {
    let stack = params.to_stack(h)?;
    let mut total = Matrix::zeros(params.readout.out_dim(), params.readout.in_dim());
    for (index, sample) in data.samples().iter().enumerate() {
        let wrap = |e: Error| Error::Sample {
            index,
            source: Box::new(e),
        };
        let z_final = match stack.as_ref() {
            Some(s) => {
                propagate(&sample.z0, s, &sample.c, PropagationMode::WithLabels).map_err(wrap)?
            }
            None => sample.z0.clone(),
        };
        total =
            total.add(&grad_theta_linear(&z_final, &params.readout, &sample.c).map_err(wrap)?)?;
    }
    Ok(LinearParams::new(total.scale(1.0 / data.len() as f64)))
}

/// Per-output-column predicted sequence positions: argmax over rows of
/// `Z_final readout^T`, ties resolved to the lowest index.
pub fn classify(z_final: &Matrix, readout: &LinearParams) -> Result<Vec<usize>> {
    Ok(argmax_per_column(&linear_forward(z_final, readout)?))
}

/// Fraction of output columns whose predicted position matches the label's
/// hot position. Requires strictly one-hot labels.
pub fn sample_accuracy(predicted: &[usize], c: &LabelMatrix) -> Result<f64> {
    let hot = c
        .hot_positions()
        .ok_or_else(|| Error::param("sample_accuracy", "labels are not strictly one-hot"))?;
    if predicted.len() != hot.len() {
        return Err(Error::dim(
            "sample_accuracy",
            format!(
                "{} predictions vs {} label columns",
                predicted.len(),
                hot.len()
            ),
        ));
    }
    let matches = predicted.iter().zip(&hot).filter(|(p, h)| p == h).count();
    Ok(matches as f64 / hot.len() as f64)
}

/// Mean classification accuracy over the dataset after propagating in the
/// given mode.
pub fn dataset_accuracy(
    data: &Dataset,
    params: &TrainableParams,
    h: f64,
    mode: PropagationMode,
) -> Result<f64> {
    let stack = params.to_stack(h)?;
    let mut total = 0.0;
    for (index, sample) in data.samples().iter().enumerate() {
        let wrap = |e: Error| Error::Sample {
            index,
            source: Box::new(e),
        };
        let z_final = match stack.as_ref() {
            Some(s) => propagate(&sample.z0, s, &sample.c, mode).map_err(wrap)?,
            None => sample.z0.clone(),
        };
        let predicted = classify(&z_final, &params.readout).map_err(wrap)?;
        total += sample_accuracy(&predicted, &sample.c).map_err(wrap)?;
    }
    Ok(total / data.len() as f64)
}

/// Outer-loop configuration. `epoch_offset` shifts the epoch labels in the
/// recorded curves (used when resuming from a checkpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub h: f64,
    pub fd_step: f64,
    #[serde(default)]
    pub epoch_offset: usize,
    pub init: TrainableParams,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::param(
                "TrainConfig",
                format!(
                    "learning_rate must be finite and >= 0, got {}",
                    self.learning_rate
                ),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::param("TrainConfig", "epochs must be at least 1"));
        }
        if !self.h.is_finite() || self.h <= 0.0 {
            return Err(Error::param(
                "TrainConfig",
                format!("h must be positive and finite, got {}", self.h),
            ));
        }
        if !self.fd_step.is_finite() || self.fd_step <= 0.0 {
            return Err(Error::param(
                "TrainConfig",
                format!("fd_step must be positive and finite, got {}", self.fd_step),
            ));
        }
        Ok(())
    }
}

/// Training result: loss and accuracy curves with one entry per epoch plus
/// the final state, accuracy in both propagation modes, and the trained
/// parameters. `wall_time` (seconds) is informational and not serialized,
/// keeping reports byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f64)>,
    pub accuracy_curve: Vec<(usize, f64)>,
    pub label_free_accuracy_curve: Vec<(usize, f64)>,
    pub final_params: TrainableParams,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Full-batch vanilla gradient descent: per epoch, record the loss and
/// both accuracies, then step every stack coordinate by a finite-difference
/// gradient and the readout by its analytic gradient. A non-finite loss
/// aborts with the partial report attached; a gradient step that breaks a
/// structural invariant (e.g. a square-root diagonal crossing zero)
/// surfaces as a parameter error instead.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let start = Instant::now();
    let mut params = config.init.clone();
    let mut loss_curve = Vec::with_capacity(config.epochs + 1);
    let mut accuracy_curve = Vec::with_capacity(config.epochs + 1);
    let mut label_free_accuracy_curve = Vec::with_capacity(config.epochs + 1);

    for k in 0..=config.epochs {
        let epoch = config.epoch_offset + k;
        let partial_report = |loss_curve: &Vec<(usize, f64)>,
                              accuracy_curve: &Vec<(usize, f64)>,
                              label_free_accuracy_curve: &Vec<(usize, f64)>,
                              params: &TrainableParams| {
            Box::new(TrainReport {
                loss_curve: loss_curve.clone(),
                accuracy_curve: accuracy_curve.clone(),
                label_free_accuracy_curve: label_free_accuracy_curve.clone(),
                final_params: params.clone(),
                wall_time: start.elapsed().as_secs_f64(),
            })
        };
        let diverged = |e: Error,
                        loss_curve: &Vec<(usize, f64)>,
                        accuracy_curve: &Vec<(usize, f64)>,
                        label_free_accuracy_curve: &Vec<(usize, f64)>,
                        params: &TrainableParams| {
            if e.is_numerical() {
                Error::TrainDiverged {
                    epoch,
                    partial: partial_report(
                        loss_curve,
                        accuracy_curve,
                        label_free_accuracy_curve,
                        params,
                    ),
                }
            } else {
                e
            }
        };

        let ce = global_ce_params(data, &params, config.h).map_err(|e| {
            diverged(
                e,
                &loss_curve,
                &accuracy_curve,
                &label_free_accuracy_curve,
                &params,
            )
        })?;
        let acc = dataset_accuracy(data, &params, config.h, PropagationMode::WithLabels).map_err(
            |e| {
                diverged(
                    e,
                    &loss_curve,
                    &accuracy_curve,
                    &label_free_accuracy_curve,
                    &params,
                )
            },
        )?;
        let lf_acc = dataset_accuracy(data, &params, config.h, PropagationMode::LabelFree)
            .map_err(|e| {
                diverged(
                    e,
                    &loss_curve,
                    &accuracy_curve,
                    &label_free_accuracy_curve,
                    &params,
                )
            })?;
        loss_curve.push((epoch, ce));
        accuracy_curve.push((epoch, acc));
        label_free_accuracy_curve.push((epoch, lf_acc));

        if k == config.epochs || config.learning_rate == 0.0 {
            continue;
        }

        let stack_coords = params.stack_coords();
        let mut grad = if stack_coords.is_empty() {
            params.zeros_like()
        } else {
            fd_over_coords(data, &params, config.h, config.fd_step, &stack_coords).map_err(|e| {
                diverged(
                    e,
                    &loss_curve,
                    &accuracy_curve,
                    &label_free_accuracy_curve,
                    &params,
                )
            })?
        };
        let readout_grad = analytic_readout_gradient(data, &params, config.h).map_err(|e| {
            diverged(
                e,
                &loss_curve,
                &accuracy_curve,
                &label_free_accuracy_curve,
                &params,
            )
        })?;
        grad.readout = readout_grad;
        params = params.axpy(&grad, -config.learning_rate)?;
    }

    Ok(TrainReport {
        loss_curve,
        accuracy_curve,
        label_free_accuracy_curve,
        final_params: params,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::grad_check;
    use crate::synth::{default_linear_init, planted_dataset, substream, StreamPurpose};
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    fn small_planted(n: usize, seed: u64) -> Dataset {
        let dims = Dims { s: 3, fi: 4, fo: 3 };
        planted_dataset(dims, n, seed).unwrap().0
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        let dims = Dims { s: 2, fi: 2, fo: 2 };
        assert!(Dataset::new(vec![], dims, 0).is_err());
        let good = Sample {
            z0: Matrix::zeros(2, 2),
            c: LabelMatrix::uniform(2, 2),
        };
        let bad = Sample {
            z0: Matrix::zeros(3, 2),
            c: LabelMatrix::uniform(3, 2),
        };
        assert!(Dataset::new(vec![good.clone()], dims, 0).is_ok());
        assert!(Dataset::new(vec![good, bad], dims, 0).is_err());
    }

    #[test]
    fn global_ce_zero_parameters_is_uniform_loss() {
        let data = small_planted(6, 3);
        let stack = LayerStack::linear_shared(Matrix::zeros(3, 4), 2, 0.5).unwrap();
        let readout = LinearParams::new(Matrix::zeros(3, 4));
        let ce = global_ce(&data, &stack, &readout).unwrap();
        let expect = 3.0 * 3.0_f64.ln();
        assert!((ce - expect).abs() < 1e-12);

        let params = TrainableParams {
            stack: StackParams::LinearShared {
                theta: Matrix::zeros(3, 4),
                depth: 2,
            },
            readout,
        };
        let ce2 = global_ce_params(&data, &params, 0.5).unwrap();
        assert_eq!(ce, ce2);
    }

    #[test]
    fn global_ce_single_sample_is_pointwise_ce() {
        let data = small_planted(1, 8);
        let params = default_linear_init(data.dims(), 0, true, 21);
        let ce = global_ce_params(&data, &params, 0.1).unwrap();
        let sample = &data.samples()[0];
        let direct = pointwise_ce(
            &linear_forward(&sample.z0, &params.readout).unwrap(),
            &sample.c,
        )
        .unwrap();
        assert_eq!(ce, direct);
    }

    #[test]
    fn fd_gradient_vanishes_at_uniform_stationary_point() {
        let dims = Dims { s: 3, fi: 2, fo: 2 };
        let samples: Vec<Sample> = (0..4)
            .map(|k| Sample {
                z0: mat(3, 2, &[0.3 * k as f64, -0.1, 0.4, 0.2, -0.5, 0.1]),
                c: LabelMatrix::uniform(3, 2),
            })
            .collect();
        let data = Dataset::new(samples, dims, 0).unwrap();
        let params = TrainableParams {
            stack: StackParams::LinearShared {
                theta: Matrix::zeros(2, 2),
                depth: 1,
            },
            readout: LinearParams::new(Matrix::zeros(2, 2)),
        };
        let grad = fd_param_gradient(&data, &params, 0.5, 1e-5).unwrap();
        match &grad.stack {
            StackParams::LinearShared { theta, .. } => assert!(theta.max_abs() <= 1e-10),
            other => panic!("unexpected variant {other:?}"),
        }
        assert!(grad.readout.theta.max_abs() <= 1e-10);
    }

    #[test]
    fn fd_readout_gradient_matches_analytic_on_regression() {
        let data = small_planted(8, 12);
        let params = default_linear_init(data.dims(), 0, true, 5);
        let fd = fd_param_gradient(&data, &params, 0.1, 1e-5).unwrap();
        let analytic = analytic_readout_gradient(&data, &params, 0.1).unwrap();
        let report = grad_check(&analytic.theta, &fd.readout.theta, 1e-6, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fd_readout_gradient_flips_sign_under_negation() {
        // logits are invariant under (Z, theta) -> (-Z, -theta), so the
        // readout gradient exactly negates.
        let data = small_planted(4, 17);
        let params = default_linear_init(data.dims(), 0, true, 6);
        let negated_samples: Vec<Sample> = data
            .samples()
            .iter()
            .map(|s| Sample {
                z0: s.z0.scale(-1.0),
                c: s.c.clone(),
            })
            .collect();
        let negated_data = Dataset::new(negated_samples, data.dims(), data.seed()).unwrap();
        let negated_params = TrainableParams {
            stack: params.stack.clone(),
            readout: LinearParams::new(params.readout.theta.scale(-1.0)),
        };
        let g = fd_param_gradient(&data, &params, 0.1, 1e-5).unwrap();
        let g_neg = fd_param_gradient(&negated_data, &negated_params, 0.1, 1e-5).unwrap();
        assert_eq!(g_neg.readout.theta, g.readout.theta.scale(-1.0));
    }

    #[test]
    fn classify_tie_breaking_and_order() {
        let readout = LinearParams::new(Matrix::identity(2));
        assert_eq!(
            classify(&mat(2, 2, &[0.0, 0.0, 0.0, 5.0]), &readout).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            classify(&Matrix::zeros(2, 2), &readout).unwrap(),
            vec![0, 0]
        );
    }

    #[test]
    fn sample_accuracy_cases() {
        let c = LabelMatrix::from_hot_positions(3, &[2, 0]).unwrap();
        assert_eq!(sample_accuracy(&[2, 0], &c).unwrap(), 1.0);
        assert_eq!(sample_accuracy(&[2, 1], &c).unwrap(), 0.5);
        assert!(sample_accuracy(&[2], &c).is_err());
        assert!(sample_accuracy(&[0, 0], &LabelMatrix::uniform(3, 2)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_flat() {
        let data = small_planted(4, 23);
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            h: 0.1,
            fd_step: 1e-5,
            epoch_offset: 0,
            init: default_linear_init(data.dims(), 1, true, 9),
        };
        let report = train(&data, &config).unwrap();
        assert_eq!(report.loss_curve.len(), 4);
        let first = report.loss_curve[0].1;
        for (epoch, ce) in &report.loss_curve {
            assert_eq!(*ce, first);
            assert!(*epoch < 4);
        }
        assert_eq!(report.final_params, config.init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_planted(6, 29);
        let config = TrainConfig {
            learning_rate: 0.2,
            epochs: 4,
            h: 0.1,
            fd_step: 1e-5,
            epoch_offset: 0,
            init: default_linear_init(data.dims(), 2, true, 10),
        };
        let a = train(&data, &config).unwrap();
        let b = train(&data, &config).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.accuracy_curve, b.accuracy_curve);
        assert_eq!(a.label_free_accuracy_curve, b.label_free_accuracy_curve);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn regression_baseline_reaches_full_accuracy() {
        let data = small_planted(16, 41);
        let config = TrainConfig {
            learning_rate: 1.0,
            epochs: 200,
            h: 0.1,
            fd_step: 1e-5,
            epoch_offset: 0,
            init: default_linear_init(data.dims(), 0, true, 11),
        };
        let report = train(&data, &config).unwrap();
        let (_, final_acc) = *report.accuracy_curve.last().unwrap();
        assert_eq!(
            final_acc, 1.0,
            "accuracy curve: {:?}",
            report.accuracy_curve
        );
        let first_ce = report.loss_curve[0].1;
        let last_ce = report.loss_curve.last().unwrap().1;
        assert!(last_ce < first_ce);
    }

    #[test]
    fn epoch_offset_shifts_curve_labels() {
        let data = small_planted(4, 23);
        let config = TrainConfig {
            learning_rate: 0.1,
            epochs: 2,
            h: 0.1,
            fd_step: 1e-5,
            epoch_offset: 7,
            init: default_linear_init(data.dims(), 0, true, 9),
        };
        let report = train(&data, &config).unwrap();
        let epochs: Vec<usize> = report.loss_curve.iter().map(|&(e, _)| e).collect();
        assert_eq!(epochs, vec![7, 8, 9]);
    }

    #[test]
    fn deeper_propagation_does_not_increase_sample_ce() {
        // One extra small-h block is one extra descent step on each
        // sample's own objective.
        let data = small_planted(5, 37);
        let mut rng = substream(51, StreamPurpose::Init);
        let theta = crate::synth::normal_matrix(&mut rng, 3, 4).scale(0.3);
        let p = LinearParams::new(theta.clone());
        for sample in data.samples() {
            let mut ce_prev =
                pointwise_ce(&linear_forward(&sample.z0, &p).unwrap(), &sample.c).unwrap();
            for depth in 1..=4 {
                let stack = LayerStack::linear_shared(theta.clone(), depth, 0.01).unwrap();
                let z =
                    propagate(&sample.z0, &stack, &sample.c, PropagationMode::WithLabels).unwrap();
                let ce = pointwise_ce(&linear_forward(&z, &p).unwrap(), &sample.c).unwrap();
                assert!(ce <= ce_prev + 1e-10, "depth {depth}: {ce} > {ce_prev}");
                ce_prev = ce;
            }
        }
    }

    #[test]
    fn divergence_aborts_with_partial_report() {
        let data = small_planted(4, 53);
        let config = TrainConfig {
            learning_rate: 1e160,
            epochs: 10,
            h: 0.1,
            fd_step: 1e-5,
            epoch_offset: 0,
            init: default_linear_init(data.dims(), 1, true, 13),
        };
        match train(&data, &config) {
            Err(Error::TrainDiverged { epoch, partial }) => {
                assert!(epoch <= 10);
                assert!(!partial.loss_curve.is_empty());
                assert!(partial.loss_curve.iter().all(|(_, ce)| ce.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn accuracy_invariant_under_readout_rescaling(
            seed in 0u64..1000,
            k in 0.5f64..4.0,
        ) {
            let mut rng = substream(seed, StreamPurpose::Probe);
            let z = crate::synth::normal_matrix(&mut rng, 3, 4);
            let readout = LinearParams::new(crate::synth::normal_matrix(&mut rng, 3, 4));
            let scaled = LinearParams::new(readout.theta.scale(k));
            prop_assert_eq!(
                classify(&z, &readout).unwrap(),
                classify(&z, &scaled).unwrap()
            );
        }
    }
}
