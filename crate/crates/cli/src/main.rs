use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod plot;

/// Differentiable rigid-body simulation and parameter identification.
#[derive(Parser)]
#[command(name = "diffphys", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario dataset and write it with its render assets.
    Generate(GenerateArgs),
    /// Simulate one trajectory, optionally rendering frames.
    Simulate(SimulateArgs),
    /// Fit masses and/or friction to a dataset.
    Identify(IdentifyArgs),
    /// Roll out a trajectory with given parameters and render it against the data.
    Predict(PredictArgs),
    /// Position and rotation errors of rollouts on the test split.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct Common {
    /// Key-value config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed (PHYS_SEED overrides).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// push, collide or incline.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// States per trajectory.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Time step, s.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub force_min: Option<f64>,
    #[arg(long)]
    pub force_max: Option<f64>,
    /// Start objects upstream of their force so they stay in view.
    #[arg(long)]
    pub upstream: Option<bool>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scenario: Option<String>,
    /// Trajectory index within the seeded sequence.
    #[arg(long)]
    pub index: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub h: Option<f64>,
    /// Override of the first body's mass.
    #[arg(long)]
    pub mass: Option<f64>,
    /// Override of every friction coefficient.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Trajectory JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for rendered frames.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Expected scenario of the dataset (checked).
    #[arg(long)]
    pub scenario: Option<String>,
    /// sysid, supervised or pixel.
    #[arg(long)]
    pub loss: Option<String>,
    /// mass, friction or both.
    #[arg(long)]
    pub free: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Free parameters start at this multiple of the ground truth.
    #[arg(long)]
    pub init_factor: Option<f64>,
    /// Explicit initial mass of the first body.
    #[arg(long)]
    pub mass_init: Option<f64>,
    /// Explicit initial friction coefficient.
    #[arg(long)]
    pub mu_init: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Frame spacing of the pixel loss, in states.
    #[arg(long)]
    pub frame_stride: Option<usize>,
    #[arg(long)]
    pub blur_start_kernel: Option<usize>,
    #[arg(long)]
    pub blur_start_sigma: Option<f64>,
    #[arg(long)]
    pub blur_end_kernel: Option<usize>,
    #[arg(long)]
    pub blur_end_sigma: Option<f64>,
    /// Stop early once the loss drops below this value.
    #[arg(long)]
    pub loss_tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `params.json` from `identify`; ground truth when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Trajectory index; defaults to the first test trajectory.
    #[arg(long)]
    pub traj: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Metrics CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Identify(a) => commands::identify(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
