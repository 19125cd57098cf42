mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "posegan", version, about = "Self-supervised 2D animal pose estimation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config for the subcommand; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Allow writing into an existing non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Pin numeric kernels to one thread for bit-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 2D pose prior, optionally with rendered images.
    GeneratePrior(commands::PriorArgs),
    /// Decode a video or image directory into numbered grayscale frames.
    ExtractFrames(commands::ExtractArgs),
    /// Train on an image set and an unpaired prior.
    Train(commands::TrainArgs),
    /// Predict poses for an image set with a trained checkpoint.
    Predict(commands::PredictArgs),
    /// Score predictions against annotations, with overlays and plots.
    Evaluate(commands::EvaluateArgs),
    /// Rasterize poses into skeleton images.
    Render(commands::RenderArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !matches!(e.kind(), clap::error::ErrorKind::MissingRequiredArgument) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.global.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use posegan::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::Divergence { .. }) => 3,
            CliError::Core(_) | CliError::Io(_) => 2,
        }
    }
}
