//! Wasm bindings for the browser playground in `static/`. Every export
//! takes a JSON request string and returns a JSON response string, so the
//! whole surface is testable on the host; the `wasm_bindgen` attribute is
//! the only wasm-specific ingredient.
//!
//! Instances are drawn exactly like the CLI draws them (same substream,
//! same order: features, parameters, labels), so a seed entered in the
//! browser reproduces `attnflow flow --seed <seed> ...`.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use attnflow::synth::{
    normal_matrix, random_onehot_labels, random_phi, random_stochastic_labels, substream,
    StreamPurpose,
};
use attnflow::{
    convergence_order_study, integrate_flow, run_blocks, Error, FlowMethod, GradForm, LabelMatrix,
    LayerStack, LinearParams, Model, QuadParams, Trajectory,
};

/// Request sizes are capped so a stray zero in a text box cannot hang the
/// browser tab; the CLI is the tool for larger runs.
const MAX_SEQ: usize = 64;
const MAX_FEATURES: usize = 32;
const MAX_STEPS: usize = 5_000;
const MAX_DEPTH: usize = 64;
const MAX_H: f64 = 1e6;

#[derive(Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DemoModel {
    #[default]
    Linear,
    Quad,
}

#[derive(Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DemoMethod {
    Euler,
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DemoLabels {
    #[default]
    OneHot,
    Stochastic,
}

fn default_s() -> usize {
    8
}
fn default_fi() -> usize {
    2
}
fn default_fo() -> usize {
    8
}
fn default_flow_h() -> f64 {
    0.05
}
fn default_steps() -> usize {
    120
}
fn default_block_h() -> f64 {
    0.1
}
fn default_depth() -> usize {
    6
}
fn default_scale() -> f64 {
    1.0
}
fn default_horizon() -> f64 {
    1.0
}
fn default_h_values() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRequest {
    seed: u64,
    #[serde(default = "default_s")]
    s: usize,
    #[serde(default = "default_fi")]
    fi: usize,
    #[serde(default = "default_fo")]
    fo: usize,
    #[serde(default)]
    model: DemoModel,
    #[serde(default)]
    method: DemoMethod,
    #[serde(default)]
    labels: DemoLabels,
    #[serde(default = "default_flow_h")]
    h: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_scale")]
    theta_scale: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlocksRequest {
    seed: u64,
    #[serde(default = "default_s")]
    s: usize,
    #[serde(default = "default_fi")]
    fi: usize,
    #[serde(default = "default_fo")]
    fo: usize,
    #[serde(default)]
    model: DemoModel,
    #[serde(default)]
    labels: DemoLabels,
    #[serde(default = "default_depth")]
    depth: usize,
    #[serde(default = "default_block_h")]
    h: f64,
    #[serde(default = "default_scale")]
    theta_scale: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OrderRequest {
    seed: u64,
    #[serde(default = "default_s")]
    s: usize,
    #[serde(default = "default_fi")]
    fi: usize,
    #[serde(default = "default_fo")]
    fo: usize,
    #[serde(default)]
    model: DemoModel,
    #[serde(default = "default_horizon")]
    t: f64,
    #[serde(default = "default_h_values")]
    h_values: Vec<f64>,
}

#[derive(Serialize)]
struct CurvePoint {
    step: usize,
    time: f64,
    ce: f64,
    grad_norm: f64,
    residual: f64,
}

/// Trajectory plus plotting aids: the first two feature coordinates of
/// every sequence position per record (when the width allows), and a
/// group index per position for coloring (`-1` when no label column
/// selects it).
#[derive(Serialize)]
struct TrajectoryResponse {
    curve: Vec<CurvePoint>,
    tokens: Option<Vec<Vec<[f64; 2]>>>,
    token_groups: Vec<i64>,
    diverged_at: Option<usize>,
}

#[derive(Serialize)]
struct OrderResponse {
    points: Vec<[f64; 2]>,
    slope: Option<f64>,
}

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| format!("invalid request: {e}"))
}

fn cap(name: &str, value: usize, max: usize) -> Result<(), String> {
    if value == 0 || value > max {
        return Err(format!("{name} must be in 1..={max}, got {value}"));
    }
    Ok(())
}

fn cap_h(name: &str, value: f64) -> Result<(), String> {
    if !(value > 0.0 && value <= MAX_H) {
        return Err(format!("{name} must be in (0, {MAX_H}], got {value}"));
    }
    Ok(())
}

fn check_dims(s: usize, fi: usize, fo: usize) -> Result<(), String> {
    cap("s", s, MAX_SEQ)?;
    cap("fi", fi, MAX_FEATURES)?;
    cap("fo", fo, MAX_FEATURES)
}

fn draw_labels<R: rand::Rng>(rng: &mut R, kind: DemoLabels, s: usize, cols: usize) -> LabelMatrix {
    match kind {
        DemoLabels::OneHot => random_onehot_labels(rng, s, cols),
        DemoLabels::Stochastic => random_stochastic_labels(rng, s, cols),
    }
}

fn draw_model<R: rand::Rng>(
    rng: &mut R,
    model: DemoModel,
    fi: usize,
    fo: usize,
    scale: f64,
) -> Result<Model, String> {
    match model {
        DemoModel::Linear => Ok(Model::Linear(LinearParams::new(
            normal_matrix(rng, fo, fi).scale(scale),
        ))),
        DemoModel::Quad => Ok(Model::Quad(
            QuadParams::new(random_phi(rng, fi).scale(scale)).map_err(|e| e.to_string())?,
        )),
    }
}

fn label_cols(model: DemoModel, s: usize, fo: usize) -> usize {
    match model {
        DemoModel::Linear => fo,
        DemoModel::Quad => s,
    }
}

fn token_frames(trajectory: &Trajectory, fi: usize) -> Option<Vec<Vec<[f64; 2]>>> {
    if fi < 2 {
        return None;
    }
    Some(
        trajectory
            .records
            .iter()
            .map(|r| {
                (0..r.z.rows())
                    .map(|i| [r.z.get(i, 0), r.z.get(i, 1)])
                    .collect()
            })
            .collect(),
    )
}

fn token_groups(c: &LabelMatrix) -> Vec<i64> {
    (0..c.rows())
        .map(|i| {
            let mut best = -1_i64;
            let mut best_val = 0.0;
            for j in 0..c.cols() {
                let v = c.values().get(i, j);
                if v > best_val {
                    best_val = v;
                    best = j as i64;
                }
            }
            best
        })
        .collect()
}

fn trajectory_response(
    result: Result<Trajectory, Error>,
    c: &LabelMatrix,
    fi: usize,
) -> Result<String, String> {
    let (trajectory, diverged_at) = match result {
        Ok(t) => (t, None),
        Err(Error::Diverged { step, last }) => (*last, Some(step)),
        Err(e) => return Err(e.to_string()),
    };
    let response = TrajectoryResponse {
        curve: trajectory
            .records
            .iter()
            .map(|r| CurvePoint {
                step: r.step,
                time: r.time,
                ce: r.ce,
                grad_norm: r.grad_norm,
                residual: r.residual,
            })
            .collect(),
        tokens: token_frames(&trajectory, fi),
        token_groups: token_groups(c),
        diverged_at,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

/// Integrate the continuous gradient flow from a seeded instance and
/// return the loss curve plus per-record token coordinates.
#[wasm_bindgen]
pub fn flow_demo(input: &str) -> Result<String, String> {
    let req: FlowRequest = parse(input)?;
    check_dims(req.s, req.fi, req.fo)?;
    cap("steps", req.steps, MAX_STEPS)?;
    cap_h("h", req.h)?;

    let mut rng = substream(req.seed, StreamPurpose::Data);
    let z = normal_matrix(&mut rng, req.s, req.fi);
    let model = draw_model(&mut rng, req.model, req.fi, req.fo, req.theta_scale)?;
    let c = draw_labels(
        &mut rng,
        req.labels,
        req.s,
        label_cols(req.model, req.s, req.fo),
    );
    let method = match req.method {
        DemoMethod::Euler => FlowMethod::Euler,
        DemoMethod::Rk4 => FlowMethod::Rk4,
    };
    trajectory_response(
        integrate_flow(&z, &model, &c, req.h, req.steps, method),
        &c,
        req.fi,
    )
}

/// Propagate a seeded instance through a stack of tied blocks and return
/// one record per layer, same response shape as [`flow_demo`].
#[wasm_bindgen]
pub fn blocks_demo(input: &str) -> Result<String, String> {
    let req: BlocksRequest = parse(input)?;
    check_dims(req.s, req.fi, req.fo)?;
    cap("depth", req.depth, MAX_DEPTH)?;
    cap_h("h", req.h)?;

    let mut rng = substream(req.seed, StreamPurpose::Data);
    let z = normal_matrix(&mut rng, req.s, req.fi);
    let stack = match req.model {
        DemoModel::Linear => LayerStack::linear_shared(
            normal_matrix(&mut rng, req.fo, req.fi).scale(req.theta_scale),
            req.depth,
            req.h,
        ),
        DemoModel::Quad => LayerStack::quad_shared(
            random_phi(&mut rng, req.fi).scale(req.theta_scale),
            req.depth,
            req.h,
            GradForm::Exact,
        ),
    }
    .map_err(|e| e.to_string())?;
    let c = draw_labels(
        &mut rng,
        req.labels,
        req.s,
        label_cols(req.model, req.s, req.fo),
    );
    trajectory_response(run_blocks(&z, &stack, &c), &c, req.fi)
}

/// Global split-step error at a fixed horizon for each step size, plus
/// the fitted log-log slope.
#[wasm_bindgen]
pub fn order_demo(input: &str) -> Result<String, String> {
    let req: OrderRequest = parse(input)?;
    check_dims(req.s, req.fi, req.fo)?;
    cap_h("t", req.t)?;
    cap("h_values length", req.h_values.len(), 12)?;
    for h in &req.h_values {
        cap_h("h_values entry", *h)?;
    }

    let mut rng = substream(req.seed, StreamPurpose::Data);
    let z = normal_matrix(&mut rng, req.s, req.fi);
    let model = draw_model(&mut rng, req.model, req.fi, req.fo, 1.0)?;
    let c = draw_labels(
        &mut rng,
        DemoLabels::Stochastic,
        req.s,
        label_cols(req.model, req.s, req.fo),
    );
    let study =
        convergence_order_study(&z, &model, &c, &req.h_values, req.t).map_err(|e| e.to_string())?;
    let response = OrderResponse {
        points: study.points.iter().map(|&(h, e)| [h, e]).collect(),
        slope: study.slope,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}
