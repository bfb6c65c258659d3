//! Experiment runner. Every subcommand resolves config from flags and an
//! optional JSON file (flags win), runs seeded library operations, and
//! writes its artifacts plus a `manifest.json` with content digests.
//! Outputs are byte-reproducible for identical config and seed; only the
//! manifest timestamps vary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod config;
mod manifest;
mod run;

use config::{FormKind, LabelKind, MethodKind, ModelKind};

#[derive(Parser)]
#[command(
    name = "attnflow",
    version,
    about = "Seeded experiments on attention blocks as split gradient flow",
    after_help = "Exit codes: 0 success, 2 validation error, 3 numerical failure (divergence or \
                  non-finite values), 4 assertion failure (e.g. a gradient check that did not \
                  pass).\nEnvironment: ATTNFLOW_OUT_DIR sets the output directory when --out is \
                  absent.\nConfig file: a flat JSON object using the same keys as the long \
                  flags; unknown keys are rejected and flags override file values."
)]
struct Cli {
    /// JSON config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: ATTNFLOW_OUT_DIR, config out_dir, or ./out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; required here or in the config file, no default
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify analytic feature gradients against central finite differences
    CheckGrad(CheckGradArgs),
    /// Integrate the cross-entropy gradient flow and record the trajectory
    Flow(FlowArgs),
    /// Propagate features through a block stack, one record per layer
    Blocks(BlocksArgs),
    /// Measure split-step global error against step size
    Order(OrderArgs),
    /// Train a block stack and linear readout on a planted task
    Train(TrainArgs),
    /// Continue a training run from a checkpoint file
    Resume(ResumeArgs),
}

#[derive(Args, Debug)]
pub struct DimsArgs {
    /// Sequence length S
    #[arg(long)]
    pub s: Option<usize>,
    /// Feature width Fi
    #[arg(long)]
    pub fi: Option<usize>,
    /// Output count Fo
    #[arg(long)]
    pub fo: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CheckGradArgs {
    /// Model whose feature gradient is certified (default: linear)
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Number of random instances (default: 50)
    #[arg(long)]
    pub instances: Option<usize>,
    /// Relative tolerance after the absolute floor (default: 1e-6)
    #[arg(long, allow_negative_numbers = true)]
    pub rel_tol: Option<f64>,
    /// Absolute error floor (default: 1e-8)
    #[arg(long, allow_negative_numbers = true)]
    pub abs_tol: Option<f64>,
    /// Central-difference step (default: 1e-5)
    #[arg(long, allow_negative_numbers = true)]
    pub fd_step: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    #[command(flatten)]
    pub dims: DimsArgs,
    /// Logit model (default: linear); the quad flow uses the exact gradient
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Integrator (default: rk4)
    #[arg(long, value_enum)]
    pub method: Option<MethodKind>,
    /// Label generator (default: one_hot)
    #[arg(long, value_enum)]
    pub labels: Option<LabelKind>,
    /// Step size (default: 0.05)
    #[arg(long, allow_negative_numbers = true)]
    pub h: Option<f64>,
    /// Step count (default: 200)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Scale applied to the drawn parameters; 0 freezes a linear flow (default: 1)
    #[arg(long, allow_negative_numbers = true)]
    pub theta_scale: Option<f64>,
    /// Also write states.jsonl with the full feature matrix per record
    #[arg(long)]
    pub dump_states: bool,
}

#[derive(Args, Debug)]
pub struct BlocksArgs {
    #[command(flatten)]
    pub dims: DimsArgs,
    /// Logit model (default: linear)
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Quadratic attention sub-step form (default: exact)
    #[arg(long, value_enum)]
    pub form: Option<FormKind>,
    /// Label generator (default: one_hot)
    #[arg(long, value_enum)]
    pub labels: Option<LabelKind>,
    /// Number of blocks (default: 4)
    #[arg(long)]
    pub depth: Option<usize>,
    /// One parameter matrix tied across all blocks (default: true)
    #[arg(long)]
    pub shared: Option<bool>,
    /// Block step size (default: 0.1)
    #[arg(long, allow_negative_numbers = true)]
    pub h: Option<f64>,
    /// Scale applied to the drawn parameters (default: 1)
    #[arg(long, allow_negative_numbers = true)]
    pub theta_scale: Option<f64>,
    /// Also write states.jsonl with the full feature matrix per record
    #[arg(long)]
    pub dump_states: bool,
}

#[derive(Args, Debug)]
pub struct OrderArgs {
    #[command(flatten)]
    pub dims: DimsArgs,
    /// Logit model (default: linear)
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Label generator (default: stochastic)
    #[arg(long, value_enum)]
    pub labels: Option<LabelKind>,
    /// Integration horizon; every h must divide it (default: 1.0)
    #[arg(long, allow_negative_numbers = true)]
    pub t: Option<f64>,
    /// Comma-separated step sizes, strictly decreasing (default: 0.2,0.1,0.05,0.025)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub h_values: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub dims: DimsArgs,
    /// Stack model (default: linear); quad requires fo == s
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Quadratic attention sub-step form (default: exact)
    #[arg(long, value_enum)]
    pub form: Option<FormKind>,
    /// Stack depth; 0 trains the readout alone (default: 4)
    #[arg(long)]
    pub depth: Option<usize>,
    /// One parameter matrix tied across all blocks (default: true)
    #[arg(long)]
    pub shared: Option<bool>,
    /// Inner propagation step size (default: 0.1)
    #[arg(long, allow_negative_numbers = true)]
    pub h: Option<f64>,
    /// Gradient-descent step (default: 0.5)
    #[arg(long, allow_negative_numbers = true)]
    pub learning_rate: Option<f64>,
    /// Outer epochs (default: 50)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Central-difference step for parameter gradients (default: 1e-5)
    #[arg(long, allow_negative_numbers = true)]
    pub fd_step: Option<f64>,
    /// Planted dataset size (default: 64)
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ResumeArgs {
    /// Checkpoint written by a previous train or resume run
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Additional epochs (default: the checkpointed epoch count)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Gradient-descent step (default: the checkpointed value)
    #[arg(long, allow_negative_numbers = true)]
    pub learning_rate: Option<f64>,
}

/// Failure classes mapped to the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    /// Bad input or config: exit 2.
    Validation(String),
    /// Divergence or non-finite values: exit 3.
    Numerical(String),
    /// A configured assertion did not pass: exit 4.
    Assertion(String),
    /// Filesystem trouble: exit 1.
    Io(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Numerical(_) => "numerical",
            Failure::Assertion(_) => "assertion",
            Failure::Io(_) => "io",
        }
    }

    fn detail(&self) -> &str {
        match self {
            Failure::Validation(m)
            | Failure::Numerical(m)
            | Failure::Assertion(m)
            | Failure::Io(m) => m,
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Assertion(_) => 4,
            Failure::Io(_) => 1,
        }
    }
}

impl From<attnflow::Error> for Failure {
    fn from(e: attnflow::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let file = config::load_file(cli.config.as_deref())?;
    let out_dir = config::resolve_out_dir(cli.out.clone(), &file);
    let started = manifest::now_ms();
    let (name, outcome) = match &cli.command {
        Command::CheckGrad(a) => ("check-grad", run::check_grad(a, &file, cli.seed)?),
        Command::Flow(a) => ("flow", run::flow(a, &file, cli.seed)?),
        Command::Blocks(a) => ("blocks", run::blocks(a, &file, cli.seed)?),
        Command::Order(a) => ("order", run::order(a, &file, cli.seed)?),
        Command::Train(a) => ("train", run::train_cmd(a, &file, cli.seed)?),
        Command::Resume(a) => ("resume", run::resume(a, &file)?),
    };
    manifest::write_run(&out_dir, name, outcome.config, started, &outcome.files)?;
    match outcome.failure {
        Some(f) => Err(f),
        None => {
            println!(
                "{name}: wrote {} artifact(s) and manifest.json to {}",
                outcome.files.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = execute(&cli) {
        eprintln!("error kind={} detail={:?}", f.kind(), f.detail());
        std::process::exit(f.exit_code());
    }
}
