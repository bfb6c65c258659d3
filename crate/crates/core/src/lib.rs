//! Attention blocks as numerical integrators of a cross-entropy gradient
//! flow, at desk scale and verified end to end.
//!
//! A sequence-axis softmax classifier assigns each output column a
//! distribution over sequence positions. Driving the features of that
//! classifier down their own loss gradient yields an ODE whose splitting
//! into attention and label sub-steps reproduces the two-line update of a
//! transformer block; this crate implements the pieces and checks every
//! claimed identity numerically:
//!
//! - [`linalg`]: dense row-major matrices, the sequence-axis softmax and
//!   log-sum-exp, and a symmetric-product assembler.
//! - [`models`]: linear and quadratic logit models, their cross-entropy,
//!   analytic feature/parameter gradients, and the cross-/self-attention
//!   maps the gradients are built from.
//! - [`oracle`]: an independent finite-difference differentiator, the
//!   order-3 tensor calculus behind the analytic gradients, and the
//!   certification report comparing the two.
//! - [`dynamics`]: explicit flow integrators, split block steps, layer
//!   stacks, and the convergence-order study.
//! - [`training`]: two-stage optimization of stack plus readout against
//!   the empirical mean loss, with classification metrics.
//! - [`synth`]: seeded generators for instances, planted datasets, and
//!   default initializations.
//! - [`io`]: CSV/JSONL artifact serialization and parameter checkpoints.
//!
//! Every operation validates shapes and finiteness at construction and
//! reports failures through [`Error`]; nothing panics on user input.

pub mod dynamics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod synth;
pub mod training;

pub use dynamics::{
    block_step_linear, block_step_quad, ce_rate_along_flow, convergence_order_study,
    integrate_flow, propagate, run_blocks, FlowMethod, LayerStack, LinearLayer, Model, OrderStudy,
    PropagationMode, QuadLayer, StackLayers, Trajectory, TrajectoryMethod, TrajectoryRecord,
};
pub use error::{Error, Result};
pub use io::{Checkpoint, DatasetSpec, CHECKPOINT_VERSION};
pub use linalg::{assemble_spd, frobenius_inner, lse_seq, softmax_seq, Matrix};
pub use models::{
    cross_attention, fixed_point_residual, grad_theta_linear, grad_z_linear, grad_z_quad,
    linear_forward, pointwise_ce, quad_forward, self_attention, GradForm, LabelMatrix,
    LinearParams, QuadParams,
};
pub use oracle::{
    compose_general_grad, fd_gradient, grad_check, lse_grad_tensor, GradReport, Tensor3,
};
pub use synth::{planted_dataset, StreamPurpose};
pub use training::{
    analytic_readout_gradient, classify, dataset_accuracy, fd_param_gradient, global_ce,
    global_ce_params, sample_accuracy, train, Dataset, Dims, Sample, StackParams, TrainConfig,
    TrainReport, TrainableParams,
};
