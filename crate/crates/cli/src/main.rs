//! `edgeshift`: dataset generation, the three training stages, evaluation
//! and field analysis.

mod commands;
mod config;
mod error;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgeshift::dataset::Split;
use edgeshift::eval::{Setting, Tolerance};

#[derive(Debug, Parser)]
#[command(name = "edgeshift", version, about = "Edge detection under pixel-level label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (dataset root or run directory).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset with known corruption fields.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        complexity: Option<u32>,
        /// Expected shift on clean edge pixels, in pixels.
        #[arg(long)]
        noise: Option<f64>,
        /// Density window of the corruption model.
        #[arg(long)]
        window_n: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Stage 1: train the detector on noisy labels and select a checkpoint.
    Warmup {
        #[command(flatten)]
        common: Common,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 2: train the shift localizer against the frozen detector.
    TrainPsl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha4: Option<f64>,
        /// Density window of the shift-magnitude prior.
        #[arg(long)]
        window_n: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 3: train the detector through the frozen localizer.
    Joint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also train the label-correction baseline.
        #[arg(long)]
        label_correction: bool,
    },
    /// Benchmark trained detectors on dataset splits.
    Evaluate {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values = ["val-noisy", "val-clean"])]
        split: Vec<Split>,
        #[arg(long, default_value = "thin")]
        setting: Setting,
        /// Matching tolerance: `2px` or a fraction of the image diagonal.
        #[arg(long, default_value = "0.0075")]
        tolerance: Tolerance,
        /// Models to score (warmup, joint, correction); default all trained.
        #[arg(long, value_delimiter = ',')]
        model: Vec<commands::Model>,
    },
    /// Endpoint-error analysis of the trained localizer.
    AnalyzeField {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val-noisy")]
        split: Split,
        #[arg(long, default_value = "2px")]
        tolerance: Tolerance,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            common,
            scenes,
            size,
            classes,
            complexity,
            noise,
            window_n,
            train_fraction,
        } => commands::cmd_generate(
            &common.out,
            common.config.as_deref(),
            common.force,
            commands::GenerateOverrides {
                seed: common.seed,
                scenes,
                size,
                classes,
                complexity,
                noise,
                window_n,
                train_fraction,
            },
        ),
        Command::Warmup { common, data, epochs } => {
            commands::cmd_warmup(&common.out, &data, common.config.as_deref(), common.force, common.seed, epochs)
        }
        Command::TrainPsl {
            common,
            tau,
            alpha4,
            window_n,
            epochs,
        } => commands::cmd_train_psl(
            &common.out,
            common.config.as_deref(),
            common.force,
            commands::PslOverrides {
                seed: common.seed,
                tau,
                alpha4,
                window_n,
                epochs,
            },
        ),
        Command::Joint {
            common,
            beta2,
            epochs,
            label_correction,
        } => commands::cmd_joint(
            &common.out,
            common.config.as_deref(),
            common.force,
            common.seed,
            beta2,
            epochs,
            label_correction,
        ),
        Command::Evaluate {
            out,
            split,
            setting,
            tolerance,
            model,
        } => commands::cmd_evaluate(&out, &split, setting, tolerance, &model),
        Command::AnalyzeField { out, split, tolerance } => commands::cmd_analyze_field(&out, split, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edgeshift: {e}");
            e.exit_code()
        }
    }
}
