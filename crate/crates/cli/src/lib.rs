//! Command-line driver: PPM frame ingestion, the JSON config, tensor files,
//! reports, and the `encode`, `bench-mem`, `bench-latency`, `ablate`,
//! `toy-train` and `inspect` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod ppm;
pub mod report;
pub mod weights;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stome_core::vision::MergePolicy;

use crate::commands::ablate::Axis;
use crate::config::{OrderFlag, Overrides, Precision, RunConfig};
use crate::error::CliResult;
use crate::report::Sink;

#[derive(Debug, Parser)]
#[command(name = "stome", version, about = "Sorted token merge with a recurrent language model")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Without it the main report goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, global = true, value_enum)]
    pub order: Option<OrderFlag>,
    #[arg(long, global = true)]
    pub keep_ratio: Option<f64>,
    #[arg(long, global = true, value_parser = parse_policy)]
    pub policy: Option<MergePolicy>,
    /// Include per-layer merge traces.
    #[arg(long, global = true)]
    pub trace: bool,
}

fn parse_policy(s: &str) -> Result<MergePolicy, String> {
    match s {
        "always" => Ok(MergePolicy::Always),
        "multi-frame-only" => Ok(MergePolicy::MultiFrameOnly),
        _ => Err(format!("unknown policy {s:?}; expected always or multi-frame-only")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a directory of P6 frames and report token counts and layout.
    Encode {
        frames: PathBuf,
        /// Tensor file with encoder weights (bare or under `vision.`).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write every frame's tokens to `tokens.bin` (needs --out).
        #[arg(long)]
        dump_tokens: bool,
    },
    /// Peak sequence-dependent memory against frame count.
    BenchMem,
    /// Per-token decode time against prefix length.
    BenchLatency,
    /// Accuracy of the needle task across token orders or keep ratios.
    Ablate {
        #[arg(long, value_enum, default_value = "order")]
        axis: Axis,
    },
    /// Train the toy model on the needle task.
    ToyTrain,
    /// Schedules, layout and closed forms for a config.
    Inspect {
        /// Frames to derive the count (and traces) from.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n_frames: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let s = &cli.shared;
    let overrides = Overrides {
        seed: s.seed,
        precision: s.precision,
        order: s.order,
        keep_ratio: s.keep_ratio,
        policy: s.policy,
    };
    let cfg = RunConfig::load(s.config.as_deref())?.apply(&overrides);
    cfg.validate()?;
    let mut sink = Sink::new(s.out.as_deref())?;
    match &cli.command {
        Command::Encode {
            frames,
            weights,
            dump_tokens,
        } => {
            if *dump_tokens && s.out.is_none() {
                return Err(error::CliError::Config("--dump-tokens needs --out".into()));
            }
            let args = commands::encode::EncodeArgs {
                frames: frames.clone(),
                weights: weights.clone(),
                dump_tokens: *dump_tokens,
                trace: s.trace,
            };
            commands::encode::run(&cfg, &args, &mut sink)
        }
        Command::BenchMem => commands::bench_mem::run(&cfg, &mut sink),
        Command::BenchLatency => commands::bench_latency::run(&cfg, &mut sink),
        Command::Ablate { axis } => commands::ablate::run(&cfg, *axis, &mut sink),
        Command::ToyTrain => commands::toy_train::run(&cfg, &mut sink),
        Command::Inspect {
            frames,
            n_frames,
            weights,
        } => {
            let args = commands::inspect::InspectArgs {
                frames: frames.clone(),
                n_frames: *n_frames,
                weights: weights.clone(),
                trace: s.trace,
            };
            commands::inspect::run(&cfg, &args, &mut sink)
        }
    }
}
