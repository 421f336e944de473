//! The `cordvip` command-line tool.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    bench_fk, eval, gen_data, inspect, pretrain, read_dataset, train, BenchReport, DatasetManifest, EvalSummary,
    ManifestEntry, EVAL_CSV_HEADER, MANIFEST_FILE,
};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cordvip", version, about = "Correspondence pretraining and diffusion policies on a planar-push toy task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted demonstrations as episode packs plus a manifest.
    GenData {
        #[arg(long, default_value = "planar-push")]
        env: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Contact and coordination pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from an encoder checkpoint up to the configured epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch CSV log; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the diffusion policy; without --encoder the encoder starts random.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        freeze_encoder: bool,
        /// Per-epoch CSV log; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Seeded closed-loop rollouts of a trained policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Dump one step's clouds and contact map as CSV.
    Inspect {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
        /// Adds the encoder's predicted contact column.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Point-cloud forward-kinematics throughput on a serial test chain.
    BenchFk {
        #[arg(long, default_value_t = 20)]
        links: usize,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
