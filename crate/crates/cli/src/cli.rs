use std::path::PathBuf;

use clap::{Parser, Subcommand};
use flowprox_core::train::Task;

#[derive(Debug, Parser)]
#[command(
    name = "flowprox",
    version,
    about = "Unrolled proximal-gradient image reconstruction with normalizing-flow priors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic blob dataset with a train/val/test manifest
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], required = true)]
        size: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
    /// Maximum-likelihood pretraining of the flow prior
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// End-to-end training of the unrolled network
    Train {
        /// denoise, inpaint or deblur
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start every fold from this pretrained flow checkpoint
        #[arg(long, conflicts_with = "no_pretrain")]
        pretrained: Option<PathBuf>,
        /// Start from identity-initialized flows
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a single image
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the initial guess g(0) as <stem>_init.<ext>
        #[arg(long)]
        emit_init: bool,
        /// Treat the input as a clean image and synthesize the measurement
        #[arg(long)]
        measure: bool,
    },
    /// PSNR report over the test split of a dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the built-in invariant checks
    Selftest {
        #[arg(long, default_value_t = 1e-5)]
        tol_grad: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol_inv: f64,
    },
}
