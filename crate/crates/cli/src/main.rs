//! `blockfield`: train, render, export and evaluate quantized voxel fields.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime or numeric
//! failure, 4 guidance service failure.

mod commands;
mod config;
mod error;
mod manifest;
mod views;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blockfield", version, about = "Optimize voxel fields of game blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a field and write its checkpoint, metrics and turntable renders.
    Generate(GenerateArgs),
    /// Render a checkpoint's discrete grid from a turntable of views.
    Render(RenderArgs),
    /// Write a checkpoint's discrete grid as a structure file.
    Export(ExportArgs),
    /// Read a structure file and print its summary and grid hash.
    Import(ImportArgs),
    /// Post-hoc quantization of a continuous field.
    Baseline(BaselineArgs),
    /// Quantization-mode and grid-resolution ablation tables.
    Sweep(SweepArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Base URL of the scoring service.
    #[arg(long)]
    pub guidance_url: Option<String>,
    /// View directory to reconstruct.
    #[arg(long)]
    pub target_views: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of turntable views.
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Also write expected-depth images.
    #[arg(long)]
    pub depth: bool,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Camera elevation in degrees.
    #[arg(long, default_value_t = 25.0)]
    pub elevation: f64,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Palette manifest overriding the checkpoint's.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long, default_value = "renders")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write a Sponge `.schem` instead of the native format.
    #[arg(long)]
    pub schem: bool,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

#[derive(Args)]
pub struct ImportArgs {
    /// Native grid file or `.schem`.
    pub file: PathBuf,
    /// Palette manifest used to map native block names to game ids.
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

#[derive(Args)]
pub struct BaselineArgs {
    /// Field checkpoint, or a `.toml` synthetic field.
    #[arg(long)]
    pub field: PathBuf,
    /// Density at or above which a cell is solid.
    #[arg(long, default_value_t = 10.0)]
    pub threshold: f64,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Where to write the quantized grid.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub schem: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Comma-separated axes: `quantization`, `resolution`.
    #[arg(long, default_value = "quantization,resolution")]
    pub axes: String,
    /// Training steps per run (default 3000 for quantization, 400 for resolution).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Grid sizes of the resolution axis.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum EvalCommand {
    /// R-precision of a similarity matrix (JSON).
    RPrecision {
        #[arg(long)]
        scores: PathBuf,
    },
    /// PSNR between two PNG images.
    Psnr {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Render(a) => commands::render(a),
        Command::Export(a) => commands::export(a),
        Command::Import(a) => commands::import(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Eval(c) => commands::eval(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
