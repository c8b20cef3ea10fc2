//! `distill`: train a teacher, distill a synthetic set, evaluate it.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a config
//! or input error.

mod commands;
mod resolve;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cudd::data::Split;

#[derive(Parser, Debug)]
#[command(name = "distill", version, about = "Curriculum dataset distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config overlaid on the dataset preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub ipc: Option<usize>,
    /// Root seed; sets every stage's rng_seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Run directory; defaults to runs/<dataset>-ipc<ipc>-seed<seed>.
    #[arg(long = "run-dir", visible_alias = "out", global = true)]
    pub run_dir: Option<PathBuf>,
    /// Directory holding the CIFAR binaries.
    #[arg(long, env = "DISTILL_DATA_ROOT", global = true)]
    pub data_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the teacher on the original training split.
    Squeeze {
        /// Teacher architecture.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Run the curriculum pipeline and write the synthetic dataset.
    Distill {
        /// Architecture for both teacher and students.
        #[arg(long)]
        arch: Option<String>,
        /// Teacher checkpoint; defaults to <run-dir>/teacher.ckpt.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from the completed curricula in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train fresh networks on a synthetic set and report validation accuracy.
    Eval {
        /// Synthetic dataset directory; defaults to <run-dir>/final.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Evaluate a random subset of real images instead.
        #[arg(long, conflicts_with = "synthetic")]
        random_real: bool,
        #[arg(long, value_delimiter = ',')]
        archs: Option<Vec<String>>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Class-incremental evaluation over equal class groups.
    Continual {
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Write penultimate-layer features of a model.
    ExportFeatures {
        /// Model checkpoint; defaults to the run's teacher.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Export a synthetic dataset instead of an original split.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Output directory; defaults to <run-dir>/features.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
