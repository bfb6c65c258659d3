//! Implementations of the six subcommands. Each resolves its effective
//! configuration, runs the corresponding library operations, and returns
//! the artifact files for the manifest writer; assertion and divergence
//! outcomes are attached so the caller can still persist what was
//! computed before exiting nonzero.

use serde::Serialize;
use serde_json::json;

use attnflow::synth::{
    default_linear_init, default_quad_init, normal_matrix, random_linear_instance,
    random_onehot_labels, random_phi, random_quad_instance, random_stochastic_labels, substream,
    StreamPurpose,
};
use attnflow::{
    convergence_order_study, fd_gradient, grad_check, grad_z_linear, grad_z_quad, integrate_flow,
    io, linear_forward, planted_dataset, pointwise_ce, quad_forward, run_blocks, train, Checkpoint,
    DatasetSpec, Dims, Error, FlowMethod, GradForm, LabelMatrix, LayerStack, LinearLayer,
    LinearParams, Matrix, Model, QuadLayer, QuadParams, StackLayers, TrainConfig,
};

use crate::config::{
    check_count, check_positive, require_dims, require_seed, resolve, FileConfig, FormKind,
    LabelKind, MethodKind, ModelKind,
};
use crate::{BlocksArgs, CheckGradArgs, Failure, FlowArgs, OrderArgs, ResumeArgs, TrainArgs};

pub struct Outcome {
    pub config: serde_json::Value,
    pub files: Vec<(String, String)>,
    /// Set when artifacts were produced but the run should still exit
    /// nonzero (failed assertion, diverged training).
    pub failure: Option<Failure>,
}

fn labels_for<R: rand::Rng>(rng: &mut R, kind: LabelKind, s: usize, fo: usize) -> LabelMatrix {
    match kind {
        LabelKind::OneHot => random_onehot_labels(rng, s, fo),
        LabelKind::Stochastic => random_stochastic_labels(rng, s, fo),
    }
}

/// One seeded instance at fixed dimensions; draw order is features,
/// parameters, labels.
struct Instance {
    z: Matrix,
    model: Model,
    c: LabelMatrix,
}

fn seeded_instance(
    seed: u64,
    dims: Dims,
    model: ModelKind,
    labels: LabelKind,
    theta_scale: f64,
) -> Result<Instance, Failure> {
    let mut rng = substream(seed, StreamPurpose::Data);
    let z = normal_matrix(&mut rng, dims.s, dims.fi);
    match model {
        ModelKind::Linear => {
            let theta = normal_matrix(&mut rng, dims.fo, dims.fi).scale(theta_scale);
            let c = labels_for(&mut rng, labels, dims.s, dims.fo);
            Ok(Instance {
                z,
                model: Model::Linear(LinearParams::new(theta)),
                c,
            })
        }
        ModelKind::Quad => {
            let phi = random_phi(&mut rng, dims.fi).scale(theta_scale);
            let c = labels_for(&mut rng, labels, dims.s, dims.s);
            Ok(Instance {
                z,
                model: Model::Quad(QuadParams::new(phi)?),
                c,
            })
        }
    }
}

#[derive(Serialize)]
struct InstanceReport {
    max_abs_error: f64,
    max_rel_error: f64,
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
}

#[derive(Serialize)]
struct CheckGradReport {
    model: ModelKind,
    instances: usize,
    seed: u64,
    rel_tol: f64,
    abs_tol: f64,
    fd_step: f64,
    passed: bool,
    max_abs_error: f64,
    max_rel_error: f64,
    per_instance: Vec<InstanceReport>,
}

pub fn check_grad(
    args: &CheckGradArgs,
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> Result<Outcome, Failure> {
    let seed = require_seed(seed_flag, file)?;
    let model = resolve(args.model, file.model, ModelKind::Linear);
    let instances = check_count("instances", resolve(args.instances, file.instances, 50))?;
    let rel_tol = check_positive("rel_tol", resolve(args.rel_tol, file.rel_tol, 1e-6))?;
    let abs_tol = check_positive("abs_tol", resolve(args.abs_tol, file.abs_tol, 1e-8))?;
    let fd_step = check_positive("fd_step", resolve(args.fd_step, file.fd_step, 1e-5))?;

    let mut rng = match model {
        ModelKind::Linear => substream(seed, StreamPurpose::Data),
        ModelKind::Quad => substream(seed, StreamPurpose::Probe),
    };
    let mut per_instance = Vec::with_capacity(instances);
    let mut max_abs = 0.0_f64;
    let mut max_rel = 0.0_f64;
    for i in 0..instances {
        let one_hot = i % 2 == 0;
        let report = match model {
            ModelKind::Linear => {
                let (z, p, c) = random_linear_instance(&mut rng, one_hot);
                let analytic = grad_z_linear(&z, &p, &c)?;
                let numeric =
                    fd_gradient(|zz| pointwise_ce(&linear_forward(zz, &p)?, &c), &z, fd_step)?;
                let check = grad_check(&analytic, &numeric, rel_tol, abs_tol)?;
                InstanceReport {
                    max_abs_error: check.max_abs_error,
                    max_rel_error: check.max_rel_error,
                    passed: check.passed,
                    gap: None,
                }
            }
            ModelKind::Quad => {
                let (z, p, c) = random_quad_instance(&mut rng, one_hot);
                let exact = grad_z_quad(&z, &p, &c, GradForm::Exact)?;
                let numeric =
                    fd_gradient(|zz| pointwise_ce(&quad_forward(zz, &p)?, &c), &z, fd_step)?;
                let check = grad_check(&exact, &numeric, rel_tol, abs_tol)?;
                let literal = grad_z_quad(&z, &p, &c, GradForm::PaperLiteral)?;
                let gap = exact.sub(&literal)?.frobenius_norm() / exact.frobenius_norm();
                InstanceReport {
                    max_abs_error: check.max_abs_error,
                    max_rel_error: check.max_rel_error,
                    passed: check.passed,
                    gap: Some(gap),
                }
            }
        };
        max_abs = max_abs.max(report.max_abs_error);
        max_rel = max_rel.max(report.max_rel_error);
        per_instance.push(report);
    }
    let passed = per_instance.iter().all(|r| r.passed);
    let report = CheckGradReport {
        model,
        instances,
        seed,
        rel_tol,
        abs_tol,
        fd_step,
        passed,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        per_instance,
    };
    Ok(Outcome {
        config: json!({
            "seed": seed, "model": model, "instances": instances,
            "rel_tol": rel_tol, "abs_tol": abs_tol, "fd_step": fd_step,
        }),
        files: vec![(
            "report.json".into(),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )],
        failure: (!passed).then(|| {
            Failure::Assertion(format!(
                "gradient check failed: max rel error {max_rel:e} exceeds {rel_tol:e}"
            ))
        }),
    })
}

pub fn flow(
    args: &FlowArgs,
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> Result<Outcome, Failure> {
    let seed = require_seed(seed_flag, file)?;
    let dims = require_dims(args.dims.s, args.dims.fi, args.dims.fo, file)?;
    let model = resolve(args.model, file.model, ModelKind::Linear);
    let method = resolve(args.method, file.method, MethodKind::Rk4);
    let labels = resolve(args.labels, file.labels, LabelKind::OneHot);
    let h = check_positive("h", resolve(args.h, file.h, 0.05))?;
    let steps = check_count("steps", resolve(args.steps, file.steps, 200))?;
    let theta_scale = resolve(args.theta_scale, file.theta_scale, 1.0);
    if !theta_scale.is_finite() {
        return Err(Failure::Validation(format!(
            "theta_scale must be finite, got {theta_scale}"
        )));
    }
    let dump_states = args.dump_states || file.dump_states.unwrap_or(false);

    let inst = seeded_instance(seed, dims, model, labels, theta_scale)?;
    let flow_method = match method {
        MethodKind::Euler => FlowMethod::Euler,
        MethodKind::Rk4 => FlowMethod::Rk4,
    };
    let (trajectory, failure) =
        match integrate_flow(&inst.z, &inst.model, &inst.c, h, steps, flow_method) {
            Ok(t) => (t, None),
            Err(Error::Diverged { step, last }) => (
                *last,
                Some(Failure::Numerical(format!(
                    "integration diverged at step {step}; partial trajectory written"
                ))),
            ),
            Err(e) => return Err(e.into()),
        };

    let mut files = vec![("trajectory.csv".into(), io::trajectory_to_csv(&trajectory))];
    if dump_states {
        files.push((
            "states.jsonl".into(),
            io::trajectory_states_to_jsonl(&trajectory),
        ));
    }
    Ok(Outcome {
        config: json!({
            "seed": seed, "s": dims.s, "fi": dims.fi, "fo": dims.fo,
            "model": model, "method": method, "labels": labels,
            "h": h, "steps": steps, "theta_scale": theta_scale,
            "dump_states": dump_states,
        }),
        files,
        failure,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_stack(
    rng: &mut impl rand::Rng,
    dims: Dims,
    model: ModelKind,
    form: GradForm,
    depth: usize,
    shared: bool,
    h: f64,
    theta_scale: f64,
) -> Result<LayerStack, Failure> {
    let stack = match (model, shared) {
        (ModelKind::Linear, true) => LayerStack::linear_shared(
            normal_matrix(rng, dims.fo, dims.fi).scale(theta_scale),
            depth,
            h,
        )?,
        (ModelKind::Linear, false) => {
            let layers = (0..depth)
                .map(|_| LinearLayer {
                    attn: LinearParams::new(
                        normal_matrix(rng, dims.fo, dims.fi).scale(theta_scale),
                    ),
                    label: LinearParams::new(
                        normal_matrix(rng, dims.fo, dims.fi).scale(theta_scale),
                    ),
                })
                .collect();
            LayerStack::new(h, StackLayers::Linear(layers))?
        }
        (ModelKind::Quad, true) => {
            LayerStack::quad_shared(random_phi(rng, dims.fi).scale(theta_scale), depth, h, form)?
        }
        (ModelKind::Quad, false) => {
            let layers = (0..depth)
                .map(|_| {
                    let attn = QuadParams::new(random_phi(rng, dims.fi).scale(theta_scale))?;
                    let label = attn.theta().clone();
                    Ok(QuadLayer { attn, label, form })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            LayerStack::new(h, StackLayers::Quad(layers))?
        }
    };
    Ok(stack)
}

pub fn blocks(
    args: &BlocksArgs,
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> Result<Outcome, Failure> {
    let seed = require_seed(seed_flag, file)?;
    let dims = require_dims(args.dims.s, args.dims.fi, args.dims.fo, file)?;
    let model = resolve(args.model, file.model, ModelKind::Linear);
    let form: GradForm = resolve(args.form, file.form, FormKind::Exact).into();
    let labels = resolve(args.labels, file.labels, LabelKind::OneHot);
    let depth = check_count("depth", resolve(args.depth, file.depth, 4))?;
    let shared = resolve(args.shared, file.shared, true);
    let h = check_positive("h", resolve(args.h, file.h, 0.1))?;
    let theta_scale = resolve(args.theta_scale, file.theta_scale, 1.0);
    let dump_states = args.dump_states || file.dump_states.unwrap_or(false);

    let mut rng = substream(seed, StreamPurpose::Data);
    let z = normal_matrix(&mut rng, dims.s, dims.fi);
    let label_cols = match model {
        ModelKind::Linear => dims.fo,
        ModelKind::Quad => dims.s,
    };
    let stack = build_stack(&mut rng, dims, model, form, depth, shared, h, theta_scale)?;
    let c = labels_for(&mut rng, labels, dims.s, label_cols);
    let (trajectory, failure) = match run_blocks(&z, &stack, &c) {
        Ok(t) => (t, None),
        Err(Error::Diverged { step, last }) => (
            *last,
            Some(Failure::Numerical(format!(
                "propagation diverged at layer {step}; partial trajectory written"
            ))),
        ),
        Err(e) => return Err(e.into()),
    };

    let mut files = vec![("trajectory.csv".into(), io::trajectory_to_csv(&trajectory))];
    if dump_states {
        files.push((
            "states.jsonl".into(),
            io::trajectory_states_to_jsonl(&trajectory),
        ));
    }
    Ok(Outcome {
        config: json!({
            "seed": seed, "s": dims.s, "fi": dims.fi, "fo": dims.fo,
            "model": model, "form": match form {
                GradForm::Exact => "exact",
                GradForm::PaperLiteral => "paper_literal",
            },
            "labels": labels, "depth": depth, "shared": shared,
            "h": h, "theta_scale": theta_scale, "dump_states": dump_states,
        }),
        files,
        failure,
    })
}

pub fn order(
    args: &OrderArgs,
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> Result<Outcome, Failure> {
    let seed = require_seed(seed_flag, file)?;
    let dims = require_dims(args.dims.s, args.dims.fi, args.dims.fo, file)?;
    let model = resolve(args.model, file.model, ModelKind::Linear);
    let labels = resolve(args.labels, file.labels, LabelKind::Stochastic);
    let t = check_positive("t", resolve(args.t, file.t, 1.0))?;
    let h_values = resolve(
        args.h_values.clone(),
        file.h_values.clone(),
        vec![0.2, 0.1, 0.05, 0.025],
    );
    for h in &h_values {
        check_positive("h_values entry", *h)?;
    }

    let inst = seeded_instance(seed, dims, model, labels, 1.0)?;
    let study = convergence_order_study(&inst.z, &inst.model, &inst.c, &h_values, t)?;

    Ok(Outcome {
        config: json!({
            "seed": seed, "s": dims.s, "fi": dims.fi, "fo": dims.fo,
            "model": model, "labels": labels, "t": t, "h_values": h_values,
        }),
        files: vec![
            ("order.csv".into(), io::order_to_csv(&study)),
            (
                "report.json".into(),
                serde_json::to_string_pretty(&study).expect("study serializes"),
            ),
        ],
        failure: None,
    })
}

fn train_files(
    report: &attnflow::TrainReport,
    config: &TrainConfig,
    dataset: DatasetSpec,
) -> Result<Vec<(String, String)>, Failure> {
    let final_epoch = report
        .loss_curve
        .last()
        .map(|&(e, _)| e)
        .unwrap_or(config.epoch_offset);
    let checkpoint = Checkpoint::new(
        config.clone(),
        dataset,
        final_epoch,
        report.final_params.clone(),
    );
    Ok(vec![
        (
            "loss.csv".into(),
            io::curve_to_csv("epoch", "ce", &report.loss_curve),
        ),
        (
            "accuracy.csv".into(),
            io::accuracy_to_csv(&report.accuracy_curve, &report.label_free_accuracy_curve)?,
        ),
        (
            "report.json".into(),
            serde_json::to_string_pretty(report).expect("report serializes"),
        ),
        ("checkpoint.json".into(), checkpoint.to_json()),
    ])
}

pub fn train_cmd(
    args: &TrainArgs,
    file: &FileConfig,
    seed_flag: Option<u64>,
) -> Result<Outcome, Failure> {
    let seed = require_seed(seed_flag, file)?;
    let dims = require_dims(args.dims.s, args.dims.fi, args.dims.fo, file)?;
    let model = resolve(args.model, file.model, ModelKind::Linear);
    let form: GradForm = resolve(args.form, file.form, FormKind::Exact).into();
    let depth = resolve(args.depth, file.depth, 4);
    let shared = resolve(args.shared, file.shared, true);
    let h = check_positive("h", resolve(args.h, file.h, 0.1))?;
    let learning_rate = resolve(args.learning_rate, file.learning_rate, 0.5);
    let epochs = check_count("epochs", resolve(args.epochs, file.epochs, 50))?;
    let fd_step = check_positive("fd_step", resolve(args.fd_step, file.fd_step, 1e-5))?;
    let samples = check_count("samples", resolve(args.samples, file.samples, 64))?;
    if model == ModelKind::Quad && dims.fo != dims.s {
        return Err(Failure::Validation(format!(
            "quad model needs square labels: fo ({}) must equal s ({})",
            dims.fo, dims.s
        )));
    }

    let (data, _) = planted_dataset(dims, samples, seed)?;
    let init = match model {
        ModelKind::Linear => default_linear_init(dims, depth, shared, seed),
        ModelKind::Quad => default_quad_init(dims, depth, shared, form, seed),
    };
    let config = TrainConfig {
        learning_rate,
        epochs,
        h,
        fd_step,
        epoch_offset: 0,
        init,
    };
    config.validate()?;
    let dataset_spec = DatasetSpec {
        dims,
        samples,
        seed,
    };
    let echo = json!({
        "seed": seed, "s": dims.s, "fi": dims.fi, "fo": dims.fo,
        "model": model, "depth": depth, "shared": shared,
        "h": h, "learning_rate": learning_rate, "epochs": epochs,
        "fd_step": fd_step, "samples": samples,
    });

    match train(&data, &config) {
        Ok(report) => Ok(Outcome {
            config: echo,
            files: train_files(&report, &config, dataset_spec)?,
            failure: None,
        }),
        Err(Error::TrainDiverged { epoch, partial }) => Ok(Outcome {
            config: echo,
            files: train_files(&partial, &config, dataset_spec)?,
            failure: Some(Failure::Numerical(format!(
                "training diverged at epoch {epoch}; partial artifacts written"
            ))),
        }),
        Err(e) => Err(e.into()),
    }
}

pub fn resume(args: &ResumeArgs, file: &FileConfig) -> Result<Outcome, Failure> {
    let path = args
        .checkpoint
        .clone()
        .or_else(|| file.checkpoint.clone())
        .ok_or_else(|| {
            Failure::Validation(
                "checkpoint is required (pass --checkpoint or set \"checkpoint\" in the config)"
                    .into(),
            )
        })?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    let ck = Checkpoint::from_json(&text)?;
    let epochs = check_count(
        "epochs",
        resolve(args.epochs, file.epochs, ck.config.epochs),
    )?;
    let learning_rate = resolve(
        args.learning_rate,
        file.learning_rate,
        ck.config.learning_rate,
    );

    let (data, _) = planted_dataset(ck.dataset.dims, ck.dataset.samples, ck.dataset.seed)?;
    let config = TrainConfig {
        learning_rate,
        epochs,
        h: ck.config.h,
        fd_step: ck.config.fd_step,
        epoch_offset: ck.epoch,
        init: ck.params.clone(),
    };
    config.validate()?;
    let echo = json!({
        "checkpoint": path.display().to_string(),
        "seed": ck.dataset.seed,
        "s": ck.dataset.dims.s, "fi": ck.dataset.dims.fi, "fo": ck.dataset.dims.fo,
        "samples": ck.dataset.samples,
        "h": config.h, "learning_rate": learning_rate, "epochs": epochs,
        "fd_step": config.fd_step, "epoch_offset": ck.epoch,
    });

    match train(&data, &config) {
        Ok(report) => Ok(Outcome {
            config: echo,
            files: train_files(&report, &config, ck.dataset)?,
            failure: None,
        }),
        Err(Error::TrainDiverged { epoch, partial }) => Ok(Outcome {
            config: echo,
            files: train_files(&partial, &config, ck.dataset)?,
            failure: Some(Failure::Numerical(format!(
                "training diverged at epoch {epoch}; partial artifacts written"
            ))),
        }),
        Err(e) => Err(e.into()),
    }
}
