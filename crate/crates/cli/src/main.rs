//! `glasseg`: train, evaluate and apply RGB-thermal glass segmentation models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glasseg::GlassError;

use crate::commands::{parse_size, CorrectDepthArgs, EvalArgs, PredictArgs, SynthArgs};
use crate::config::{ConfigError, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "glasseg", version, about = "Glass segmentation from aligned RGB and thermal images")]
struct Cli {
    /// TOML run configuration with [data], [model], [train] and [eval] tables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides train.seed (and seeds `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Comma-separated input/fusion/decoder/backbone names, e.g. `rgb-only,SFC`.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    device: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "glasseg-out")]
    out: PathBuf,
    /// Full-key override such as `train.batch_size=4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the manifest's training split and report on its test split.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, or a directory of saved probability maps.
    Eval {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory with one `<rgb stem>.png` probability map per entry.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest split to score; defaults to data.test_split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Write the probability map and binary mask for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: Option<PathBuf>,
        #[arg(long)]
        thermal: Option<PathBuf>,
    },
    /// Mask statistics: area and component histograms plus the location map.
    Stats {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Restrict to one split; all entries by default.
        #[arg(long)]
        split: Option<String>,
    },
    /// Generate a synthetic dataset with a manifest and a starter config.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// HEIGHTxWIDTH
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 3)]
        max_regions: usize,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
    },
    /// Replace depth inside glass regions by fitted planes.
    CorrectDepth {
        /// 16-bit PNG in millimeters or `.npy` in meters.
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// fx,fy,cx,cy in pixels.
        #[arg(long)]
        intrinsics: String,
        /// Also write a PLY point cloud of the corrected depth.
        #[arg(long)]
        ply: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        deterministic: cli.deterministic,
        variant: cli.variant.clone(),
        device: cli.device.clone(),
        set: cli.set.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Train { resume } => commands::train(&cfg, out, resume),
        Command::Eval {
            checkpoint,
            predictions,
            manifest,
            split,
        } => commands::eval(
            &cfg,
            out,
            EvalArgs {
                checkpoint,
                predictions,
                manifest,
                split,
            },
        ),
        Command::Predict { checkpoint, rgb, thermal } => commands::predict(out, PredictArgs { checkpoint, rgb, thermal }),
        Command::Stats { manifest, split } => commands::stats(&cfg, out, manifest, split),
        Command::Synth {
            count,
            size,
            max_regions,
            test_fraction,
        } => commands::synth(
            cfg.train.seed,
            out,
            SynthArgs {
                count,
                size,
                max_regions,
                test_fraction,
            },
        ),
        Command::CorrectDepth {
            depth,
            mask,
            intrinsics,
            ply,
        } => commands::correct(
            out,
            CorrectDepthArgs {
                depth,
                mask,
                intrinsics,
                ply,
            },
        ),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<ConfigError>() || matches!(err.downcast_ref::<GlassError>(), Some(GlassError::Config(_))) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
