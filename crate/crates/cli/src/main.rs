mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// World-space two-hand trajectories from monocular video tracks.
#[derive(Parser)]
#[command(name = "handtraj", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit world trajectories to keypoint tracks and a SLAM camera.
    Optimize(OptimizeArgs),
    /// Score predicted trajectories against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Fit or inspect a motion prior.
    #[command(subcommand)]
    Prior(PriorCommand),
    /// Check, export or derive bounds from a hand model.
    #[command(subcommand)]
    Model(ModelCommand),
}

#[derive(Args, Clone)]
pub struct ModelArg {
    /// Hand model file, or `builtin` for the bundled procedural model.
    #[arg(long, env = "HANDTRAJ_MODEL", default_value = "builtin")]
    pub model: String,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// JSON or TOML file layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g. `stage2.phases.0.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub tracks: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    /// Motion prior file; required unless the prior stage is skipped.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Biomechanical bounds file shared by both hands.
    #[arg(long)]
    pub bounds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after the second stage.
    #[arg(long)]
    pub skip_stage3: bool,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predicted trajectory file, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth file, or a directory with files of the same names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Worker threads across sequences.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Subcommand)]
pub enum PriorCommand {
    /// Fit a linear Gaussian prior to world trajectories.
    Fit(PriorFitArgs),
    /// Print a prior's summary.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args)]
pub struct PriorFitArgs {
    /// World trajectory files; each hand contributes every fully visible window.
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = handtraj::prior::DEFAULT_WINDOW)]
    pub window: usize,
    /// Step between windows; defaults to the window length.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Also draw this many sequences from the synthetic pose family.
    #[arg(long, default_value_t = 0)]
    pub synthetic: usize,
    /// Scenario config for the synthetic pose family.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArg,
}

#[derive(Subcommand)]
pub enum ModelCommand {
    /// Load a model and print its structure.
    Validate(ModelArg),
    /// Write the model to a file, optionally mirrored to the other hand.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mirror: bool,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Write the default biomechanical bounds derived from the model.
    Bounds {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(a) => commands::optimize(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Prior(PriorCommand::Fit(a)) => commands::prior_fit(&a),
        Command::Prior(PriorCommand::Inspect { path }) => commands::prior_inspect(&path),
        Command::Model(ModelCommand::Validate(m)) => commands::model_validate(&m),
        Command::Model(ModelCommand::Export { out, mirror, model }) => commands::model_export(&model, &out, mirror),
        Command::Model(ModelCommand::Bounds { out, model }) => commands::model_bounds(&model, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit as u8)
        }
    }
}
