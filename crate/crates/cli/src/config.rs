//! Config-file loading and flag/file merging. Precedence, highest first:
//! command-line flag, config-file key, documented default. The seed has no
//! default on purpose: every run must name one.

use std::fs;
use std::path::{Path, PathBuf};

use attnflow::{Dims, GradForm};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Flat key set accepted in a JSON config file. Every key is optional;
/// unknown keys are rejected. Commands read the keys they use and ignore
/// the rest.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub s: Option<usize>,
    pub fi: Option<usize>,
    pub fo: Option<usize>,
    pub model: Option<ModelKind>,
    pub form: Option<FormKind>,
    pub method: Option<MethodKind>,
    pub labels: Option<LabelKind>,
    pub instances: Option<usize>,
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub fd_step: Option<f64>,
    pub h: Option<f64>,
    pub steps: Option<usize>,
    pub t: Option<f64>,
    pub h_values: Option<Vec<f64>>,
    pub theta_scale: Option<f64>,
    pub depth: Option<usize>,
    pub shared: Option<bool>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub samples: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dump_states: Option<bool>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("malformed config {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Quad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Exact,
    #[value(name = "paper_literal", alias = "paper-literal")]
    PaperLiteral,
}

impl From<FormKind> for GradForm {
    fn from(f: FormKind) -> GradForm {
        match f {
            FormKind::Exact => GradForm::Exact,
            FormKind::PaperLiteral => GradForm::PaperLiteral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[value(name = "one_hot", alias = "one-hot")]
    OneHot,
    Stochastic,
}

pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn require_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64, Failure> {
    flag.or(file.seed).ok_or_else(|| {
        Failure::Validation("seed is required (pass --seed or set \"seed\" in the config)".into())
    })
}

pub fn require_dims(
    s: Option<usize>,
    fi: Option<usize>,
    fo: Option<usize>,
    file: &FileConfig,
) -> Result<Dims, Failure> {
    let missing = |name: &str| {
        Failure::Validation(format!(
            "{name} is required (pass --{name} or set \"{name}\" in the config)"
        ))
    };
    let dims = Dims {
        s: s.or(file.s).ok_or_else(|| missing("s"))?,
        fi: fi.or(file.fi).ok_or_else(|| missing("fi"))?,
        fo: fo.or(file.fo).ok_or_else(|| missing("fo"))?,
    };
    for (name, v) in [("s", dims.s), ("fi", dims.fi), ("fo", dims.fo)] {
        if v == 0 {
            return Err(Failure::Validation(format!("{name} must be at least 1")));
        }
    }
    Ok(dims)
}

pub fn check_positive(name: &str, value: f64) -> Result<f64, Failure> {
    if !value.is_finite() || value <= 0.0 {
        return Err(Failure::Validation(format!(
            "{name} must be positive and finite, got {value}"
        )));
    }
    Ok(value)
}

pub fn check_count(name: &str, value: usize) -> Result<usize, Failure> {
    if value == 0 {
        return Err(Failure::Validation(format!("{name} must be at least 1")));
    }
    Ok(value)
}

/// Output directory, highest precedence first: `--out`, `ATTNFLOW_OUT_DIR`,
/// config `out_dir`, `./out`.
pub fn resolve_out_dir(flag: Option<PathBuf>, file: &FileConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os("ATTNFLOW_OUT_DIR").map(PathBuf::from))
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
