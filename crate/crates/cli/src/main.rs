mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use solidtex::Axis;

#[derive(Parser)]
#[command(name = "solidtex", version, about = "Learn 3D solid textures from 2D exemplars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator from a run configuration
    Train(TrainArgs),
    /// Synthesize a volume from a checkpoint
    Synth(SynthArgs),
    /// Write one slice of a volume as a PNG
    Slice(SliceArgs),
    /// Write every slice along an axis as a PNG stack
    Export(ExportArgs),
    /// Compare a volume, checkpoint or image set with an exemplar
    Eval(EvalArgs),
    /// Run the scale-count or slicing ablation
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct Overrides {
    /// Override `train.iterations`
    #[arg(long)]
    iterations: Option<u64>,
    /// Override `train.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Override `output_dir`
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override `front_end_weights`
    #[arg(long, value_name = "PATH")]
    front_end_weights: Option<PathBuf>,
    /// Disable the frozen feature front-end
    #[arg(long)]
    no_front_end: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML)
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Override `checkpoint_every`
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume edge in voxels
    #[arg(long)]
    size: usize,
    /// Noise seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output volume file
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
pub struct SliceArgs {
    /// Volume file
    #[arg(long)]
    volume: PathBuf,
    /// Slice axis (orthogonal) or rotation axis (with --oblique45)
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// Slice index along the axis
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Take a 45-degree slice rotated about --axis instead
    #[arg(long)]
    oblique45: bool,
    /// Offset of the 45-degree plane from the volume center, in voxels
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    offset: f64,
    /// Output PNG
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
pub struct ExportArgs {
    /// Volume file
    #[arg(long)]
    volume: PathBuf,
    /// Slicing axis
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// Output directory for slice_NNN.png files
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["volume", "checkpoint", "images"])))]
pub struct EvalArgs {
    /// Exemplar image
    #[arg(long)]
    exemplar: PathBuf,
    /// Evaluate a volume file
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Evaluate a volume synthesized from a checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Compare every PNG in a directory with the exemplar (histogram only)
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    /// Edge of the synthesized volume (checkpoint mode; 0 = training resolution)
    #[arg(long, default_value_t = 0)]
    size: usize,
    /// Random slices per axis
    #[arg(long, default_value_t = 64)]
    slices: usize,
    /// Histogram bins per channel
    #[arg(long, default_value_t = solidtex::evaluation::DEFAULT_BINS)]
    bins: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report (JSON)
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["scales", "slicing"])))]
pub struct AblateArgs {
    /// Run configuration (TOML)
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated scale counts to compare
    #[arg(long, value_delimiter = ',')]
    scales: Vec<usize>,
    /// Compare orthogonal-only with orthogonal plus 45-degree fake slices
    #[arg(long)]
    slicing: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Synth(a) => commands::synth(a),
        Command::Slice(a) => commands::slice(a),
        Command::Export(a) => commands::export(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
