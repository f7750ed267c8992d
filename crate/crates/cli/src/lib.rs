//! Command surface of the `l2g` binary.

pub mod commands;
pub mod config;
pub mod gradcheck;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

/// Usage, configuration and data errors.
pub const EXIT_USAGE: i32 = 2;
/// Numerical divergence during training.
pub const EXIT_DIVERGENCE: i32 = 3;
/// A verification command found a failure.
pub const EXIT_CHECK_FAILED: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "l2g", version, about = "Local-to-global segmentation toolkit")]
pub struct Cli {
    /// Run per-sample work sequentially.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic segmentation dataset.
    GenData {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Image side length.
        #[arg(long, default_value_t = 32)]
        hw: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
        /// Output file; its stem becomes the split name.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint for `epochs` more epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = l2gnet::metrics::DEFAULT_PERCENTILE)]
        percentile: f64,
        /// Per-sample metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        scale: gradcheck::Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule to confirm failures are caught.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Dump transport plans, positional weights, code usage and predictions.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the mapper and report Sinkhorn marginal residuals.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024, 2048, 4096])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize])]
        bins: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1f64])]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![10usize])]
        iters: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Outcome of a command that completed without an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let det = cli.deterministic;
    match cli.command {
        Command::GenData { classes, count, hw, channels, seed, difficulty, out } => {
            commands::gen_data(classes, count, hw, channels, seed, difficulty, &out)
        }
        Command::Train { config, resume } => commands::train(&config, resume.as_deref(), det),
        Command::Eval { ckpt, data, percentile, out } => commands::eval(&ckpt, &data, percentile, out.as_deref(), det),
        Command::Gradcheck { scale, seed, inject_fault } => commands::gradcheck(scale, seed, inject_fault),
        Command::Inspect { ckpt, data, sample, out } => commands::inspect(&ckpt, &data, sample, &out),
        Command::Bench { sizes, bins, eps, iters, repeats, seed, out } => {
            let cfg = l2gnet::bench::BenchConfig {
                sizes,
                bins,
                epsilons: eps,
                iterations: iters,
                repeats,
                seed,
                ..Default::default()
            };
            commands::bench(&cfg, out.as_deref())
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<l2gnet::Error>() {
        Some(l2gnet::Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_USAGE,
    }
}

/// Caps the worker pool from `L2G_THREADS`, if set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("L2G_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("L2G_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("L2G_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
