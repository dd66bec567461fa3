//! `vodet`: generate synthetic sequences, run the video detection
//! pipelines, profile them, and sweep their knobs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

mod check;
mod commands;
mod config;

use config::Overrides;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("self-check failed: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(vodet_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<vodet_core::Error> for CliError {
    fn from(e: vodet_core::Error) -> Self {
        use vodet_core::Error as E;
        match e {
            E::Config(_) | E::Spec(_) | E::Format(_) => Self::Config(e.to_string()),
            e => Self::Core(e),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Invariant(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vodet",
    version,
    about = "Video object detection with location priors and level skipping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a sequence spec to frame_*.ppm plus truth.csv.
    Generate {
        /// Sequence spec (TOML).
        spec: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run a pipeline over a sequence and write detections and metrics.
    Detect {
        #[command(flatten)]
        run: Overrides,
        /// Also dump each frame's masks as run-length text or PBM bitmaps.
        #[arg(long, value_enum)]
        dump_masks: Option<commands::MaskFormat>,
    },
    /// Per-part cost of one frame.
    Profile {
        #[command(flatten)]
        run: Overrides,
        #[arg(long, default_value_t = vodet_core::profile::DEFAULT_REPETITIONS)]
        repetitions: usize,
        /// Also fit attention cost against these query counts, e.g. 256,512,1024.
        #[arg(long, value_delimiter = ',')]
        nq_sweep: Vec<usize>,
        /// Channels for the query-count sweep.
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
    /// Throughput relative to the baseline across values of r or T.
    Sweep {
        #[command(flatten)]
        run: Overrides,
        /// r or T.
        #[arg(long)]
        param: vodet_core::pipeline::SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Timed runs per value; the median ratio is reported.
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { spec, output } => commands::generate(&spec, &output),
        Command::Detect { run, dump_masks } => commands::detect(&run, dump_masks),
        Command::Profile {
            run,
            repetitions,
            nq_sweep,
            channels,
        } => commands::profile(&run, repetitions, &nq_sweep, channels),
        Command::Sweep {
            run,
            param,
            values,
            runs,
        } => commands::sweep(&run, param, &values, runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
