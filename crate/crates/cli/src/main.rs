//! `kmotion`: phantom generation, undersampling, registration, training,
//! evaluation sweeps and interpretability from one binary.
//!
//! Every subcommand is deterministic under `--seed`: rerunning with identical
//! inputs reproduces CSV outputs byte for byte. Exit codes: 0 success,
//! 2 validation error, 3 runtime failure.

mod commands;
mod config;
mod pipeline;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kmotion::error::{Error, Result};

use config::{ExperimentConfig, Method, TrajKind};

#[derive(Parser)]
#[command(
    name = "kmotion",
    version,
    about = "Dense non-rigid motion estimation from accelerated MRI k-space"
)]
struct Cli {
    /// Seed for every stochastic choice (overrides the config key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts (overrides the config key).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the cine phantom: frames, masks, ground-truth fields, previews.
    Phantom,
    /// Undersample one stored frame and write k-space, recon preview, pattern.
    Undersample {
        /// Frame index into the stored cine.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Trajectory kind (default: first configured).
        #[arg(long, value_enum)]
        trajectory: Option<TrajKind>,
        /// Acceleration factor (default: first configured).
        #[arg(long)]
        acceleration: Option<f64>,
    },
    /// Register one stored frame pair at one sampling-grid cell.
    Register {
        /// Solver: the classical LAP or the trained network.
        #[arg(long, value_enum)]
        method: Method,
        /// Fixed frame index.
        #[arg(long, default_value_t = 0)]
        fix: usize,
        /// Moving frame index.
        #[arg(long, default_value_t = 1)]
        mov: usize,
        /// Trajectory kind (default: first configured).
        #[arg(long, value_enum)]
        trajectory: Option<TrajKind>,
        /// Acceleration factor; must be on the configured grid.
        #[arg(long)]
        acceleration: f64,
        /// Checkpoint directory (required for --method lapanet).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Register every frame pair over the acceleration x trajectory grid.
    Sweep {
        /// Solver (default: the configured method).
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Checkpoint directory (required for lapanet).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the network on the staged curriculum and save a checkpoint.
    Train {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-3)]
        weight_decay: f64,
        /// First step of the Gaussian-field stage (default: 60% of steps).
        #[arg(long)]
        stage2_start: Option<usize>,
        /// First step of the cine stage (default: disabled).
        #[arg(long)]
        stage3_start: Option<usize>,
        /// Largest translation component drawn in stage 1, pixels.
        #[arg(long, default_value_t = 4.0)]
        max_shift: f64,
        /// Peak Gaussian-field magnitude drawn in stage 2, pixels.
        #[arg(long, default_value_t = 2.5)]
        gaussian_amp: f64,
    },
    /// Integrated-gradients attributions + noise-power-spectrum analysis.
    Interpret {
        /// Trained checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fix: usize,
        #[arg(long, default_value_t = 1)]
        mov: usize,
        #[arg(long, value_enum)]
        trajectory: Option<TrajKind>,
        #[arg(long)]
        acceleration: Option<f64>,
        /// Midpoint Riemann steps along the attribution path.
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Run the built-in oracle suites and print one pass/fail line each.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Phantom => commands::cmd_phantom(&cfg)?,
        Cmd::Undersample { frame, trajectory, acceleration } => {
            commands::cmd_undersample(&cfg, frame, trajectory, acceleration)?
        }
        Cmd::Register { method, fix, mov, trajectory, acceleration, checkpoint } => {
            commands::cmd_register(
                &cfg,
                method,
                fix,
                mov,
                trajectory,
                acceleration,
                checkpoint.as_deref(),
            )?
        }
        Cmd::Sweep { method, checkpoint } => {
            commands::cmd_sweep(&cfg, method, checkpoint.as_deref())?
        }
        Cmd::Train {
            steps,
            batch,
            lr,
            weight_decay,
            stage2_start,
            stage3_start,
            max_shift,
            gaussian_amp,
        } => commands::cmd_train(
            &cfg,
            &commands::TrainFlags {
                steps,
                batch,
                lr,
                weight_decay,
                stage2_start,
                stage3_start,
                max_shift,
                gaussian_amp,
            },
        )?,
        Cmd::Interpret { checkpoint, fix, mov, trajectory, acceleration, steps } => {
            commands::cmd_interpret(&cfg, &checkpoint, fix, mov, trajectory, acceleration, steps)?
        }
        Cmd::Selftest => {
            if !selftest::run(cfg.seed) {
                return Ok(3);
            }
        }
    }
    Ok(0)
}

/// 2 for rejected inputs, 3 for failures at runtime.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::ShapeMismatch(_) | Error::Format(_) => 2,
        Error::InsufficientSignal(_) | Error::NonFinite(_) | Error::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
