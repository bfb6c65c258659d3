//! Serialization of run artifacts: CSV curves and trajectories, JSONL
//! state dumps, and versioned parameter checkpoints.
//!
//! All floating-point text uses 17 significant digits so every 64-bit
//! value round-trips exactly; identical inputs therefore produce
//! byte-identical files.

use serde::{Deserialize, Serialize};

use crate::dynamics::{OrderStudy, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::training::{TrainConfig, TrainableParams};

/// Decimal form with 17 significant digits (scientific notation).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with columns `step,time,ce,grad_norm,residual`, one row per record.
pub fn trajectory_to_csv(t: &Trajectory) -> String {
    let mut out = String::from("step,time,ce,grad_norm,residual\n");
    for r in &t.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            fmt_f64(r.time),
            fmt_f64(r.ce),
            fmt_f64(r.grad_norm),
            fmt_f64(r.residual)
        ));
    }
    out
}

/// One JSON object per line with the full feature state of each record:
/// `{"step":..,"time":..,"z":{"rows":..,"cols":..,"data":[..]}}`.
pub fn trajectory_states_to_jsonl(t: &Trajectory) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        step: usize,
        time: f64,
        z: &'a Matrix,
    }
    let mut out = String::new();
    for r in &t.records {
        let line = Line {
            step: r.step,
            time: r.time,
            z: &r.z,
        };
        out.push_str(&serde_json::to_string(&line).expect("finite record serializes"));
        out.push('\n');
    }
    out
}

/// Two-column CSV of an integer-indexed curve, e.g. `epoch,ce`.
pub fn curve_to_csv(index_name: &str, value_name: &str, curve: &[(usize, f64)]) -> String {
    let mut out = format!("{index_name},{value_name}\n");
    for (idx, value) in curve {
        out.push_str(&format!("{idx},{}\n", fmt_f64(*value)));
    }
    out
}

/// CSV with columns `epoch,accuracy,label_free_accuracy`. The two curves
/// must cover the same epochs.
pub fn accuracy_to_csv(
    with_labels: &[(usize, f64)],
    label_free: &[(usize, f64)],
) -> Result<String> {
    if with_labels.len() != label_free.len() {
        return Err(Error::dim(
            "accuracy_to_csv",
            format!(
                "{} labeled vs {} label-free entries",
                with_labels.len(),
                label_free.len()
            ),
        ));
    }
    let mut out = String::from("epoch,accuracy,label_free_accuracy\n");
    for ((e1, acc), (e2, lf)) in with_labels.iter().zip(label_free) {
        if e1 != e2 {
            return Err(Error::param(
                "accuracy_to_csv",
                format!("epoch mismatch: {e1} vs {e2}"),
            ));
        }
        out.push_str(&format!("{e1},{},{}\n", fmt_f64(*acc), fmt_f64(*lf)));
    }
    Ok(out)
}

/// CSV with columns `h,error`, one row per study point.
pub fn order_to_csv(study: &OrderStudy) -> String {
    let mut out = String::from("h,error\n");
    for (h, err) in &study.points {
        out.push_str(&format!("{},{}\n", fmt_f64(*h), fmt_f64(*err)));
    }
    out
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Recipe for regenerating a planted dataset, so a checkpoint alone is
/// enough to resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dims: crate::training::Dims,
    pub samples: usize,
    pub seed: u64,
}

/// Resumable training state: the configuration it was produced under, the
/// dataset recipe, the next epoch label, and the current parameters
/// (shape headers plus row-major arrays, via the matrix JSON form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
    pub epoch: usize,
    pub params: TrainableParams,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        dataset: DatasetSpec,
        epoch: usize,
        params: TrainableParams,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            dataset,
            epoch,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::param("Checkpoint::from_json", e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::param(
                "Checkpoint::from_json",
                format!(
                    "unsupported version {} (expected {})",
                    ck.version, CHECKPOINT_VERSION
                ),
            ));
        }
        Ok(ck)
    }
}
