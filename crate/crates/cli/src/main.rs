mod commands;
mod config;
mod plots;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "detinv", version, about = "Train, invert and introspect small object detectors")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides every component seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [env: DETINV_JOBS].
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output root for run directories [env: DETINV_OUT, default: runs].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Exit with status 3 when a command's acceptance checks fail.
    #[arg(long, global = true)]
    pub check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct LayoutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Annotation file holding the target layout.
    #[arg(long)]
    pub layout: PathBuf,
    /// Image id within the layout file (default: first image).
    #[arg(long)]
    pub image_id: Option<u64>,
    /// Initial image instead of noise.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train/val splits.
    GenData {
        /// Target directory (default: `data` inside the run directory).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train a detector on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["single", "two"], default_value = "single")]
        arch: String,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Invert a layout.
    Invert(LayoutArgs),
    /// Invert a layout through both stages of a two-stage model.
    Invert2(LayoutArgs),
    /// Invert with a subset of the distance terms.
    Disentangle {
        #[command(flatten)]
        layout: LayoutArgs,
        /// Comma-separated subset of cls, reg, mask.
        #[arg(long, default_value = "cls,reg")]
        losses: String,
    },
    /// Maximize one anchor's probability for a category.
    SingleAnchor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        category: String,
        /// Anchor row (default: most central anchor of side `--side`).
        #[arg(long)]
        anchor: Option<usize>,
        #[arg(long)]
        side: Option<f64>,
    },
    /// Attribute a class score or box delta of one instance to image regions.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Annotation file with the instances of the image.
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        image_id: Option<u64>,
        /// Instance index within the image's layout.
        #[arg(long, default_value_t = 0)]
        instance: usize,
        /// `cls:<category>` or `reg:dx|dy|dw|dh`.
        #[arg(long, default_value = "cls")]
        target: String,
        #[arg(long, value_parser = ["gradcam", "normgrad", "mask"], default_value = "gradcam")]
        method: String,
        /// Feature layer: `head`, `roi` or a backbone layer index.
        #[arg(long, default_value = "head")]
        layer: String,
    },
    /// Invert val layouts with each model and evaluate with every model.
    Transfer {
        /// Comma-separated checkpoints.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Contextual objects emerging around single-anchor visualizations.
    Context {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        anchor: Option<usize>,
    },
    /// Single-anchor visualizations across anchor scale buckets.
    ScaleSweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Check a layout/annotation file against the schema.
    ValidateLayout { file: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Invert(_) => "invert",
            Command::Invert2(_) => "invert2",
            Command::Disentangle { .. } => "disentangle",
            Command::SingleAnchor { .. } => "single-anchor",
            Command::Attribute { .. } => "attribute",
            Command::Transfer { .. } => "transfer",
            Command::Context { .. } => "context",
            Command::ScaleSweep { .. } => "scale-sweep",
            Command::ValidateLayout { .. } => "validate-layout",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli, std::env::args().collect()) {
        Ok(path) => {
            if let Some(p) = path {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
