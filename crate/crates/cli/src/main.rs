//! `surfel-track`: synthesize verification scenes, track them, evaluate
//! against ground truth, and run self-diagnostics.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 tracking lost,
//! 4 diagnostic failure.

mod commands;
mod dataset;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "surfel-track", version, about)]
struct Cli {
    /// Worker threads (default: available cores; env fallback
    /// SURFEL_TRACK_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground truth.
    Synth {
        /// One of: rigid_plane, bending_sheet, two_bodies_sliding,
        /// illumination_drift, occlusion, missing_frames.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of dataset frames (0 is an error).
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pixel spacing of the surfel anchor grid.
        #[arg(long, default_value_t = 72)]
        spacing: usize,
        /// Image-border margin of the anchor grid.
        #[arg(long, default_value_t = 40)]
        margin: usize,
        #[arg(long, default_value_t = 48)]
        max_surfels: usize,
    },
    /// Track a dataset and write per-frame results.
    Track {
        #[arg(long)]
        dataset: PathBuf,
        /// static: per-surfel with fixed camera; deform: joint camera +
        /// surfels with the equilibrium regularizer; rigid_map: pose only
        /// against a frozen map.
        #[arg(long, default_value = "static")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides, last wins (e.g. --set levels=3).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Compare tracking results against dataset ground truth.
    Eval {
        /// Output directory of a `track` run.
        #[arg(long)]
        results: PathBuf,
        /// Dataset directory holding the ground-truth files.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 3D error threshold (scene units) defining ground-truth inlier
        /// labels for the ROC sweep; default 2% of mean scene depth.
        #[arg(long)]
        rmse_threshold: Option<f64>,
    },
    /// Verify every analytic Jacobian block against finite differences.
    CheckJacobians {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Demonstrate the growing-map or floating-map ambiguity numerically.
    Ambiguity {
        /// growing | floating
        #[arg(long)]
        which: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SURFEL_TRACK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }

    let result = match cli.command {
        Command::Synth {
            preset,
            seed,
            frames,
            out,
            spacing,
            margin,
            max_surfels,
        } => commands::synth::run(&preset, seed, frames, &out, spacing, margin, max_surfels),
        Command::Track {
            dataset,
            mode,
            out,
            config,
            sets,
        } => commands::track::run(&dataset, &mode, &out, config.as_deref(), &sets),
        Command::Eval {
            results,
            dataset,
            out,
            rmse_threshold,
        } => commands::eval::run(&results, &dataset, &out, rmse_threshold),
        Command::CheckJacobians { trials, seed, out } => {
            commands::check::run(trials, seed, &out)
        }
        Command::Ambiguity { which, seed, out } => commands::ambiguity::run(&which, seed, &out),
    };

    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
