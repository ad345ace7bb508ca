//! Command-line front end: `fgmp calibrate | quantize | simulate | report | inspect`.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for data errors.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fgmp::assignment::Scope;
use fgmp::clipping::ClipMode;
use fgmp::sensitivity::Policy;

use crate::commands::{Overrides, SimulateArgs};
use crate::error::{CliError, CliResult};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FGMP_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "fgmp",
    version,
    about = "Fine-grained FP4/FP8 mixed-precision quantization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every layer and write calibrated thresholds into the config.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Fraction of blocks to keep in NVFP4, in [0, 1].
        #[arg(long, value_parser = parse_ratio)]
        ratio: Option<f64>,
        /// fisher, qe or oe.
        #[arg(long, value_parser = parse_policy)]
        policy: Option<Policy>,
        /// local or global.
        #[arg(long, value_parser = parse_scope)]
        scope: Option<Scope>,
        /// sw or dynmax.
        #[arg(long, value_parser = parse_clip)]
        clip: Option<ClipMode>,
        /// Where to write the updated config; defaults to overwriting it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write mixed-precision .fgq files for each layer.
    Quantize {
        #[arg(long)]
        config: PathBuf,
        /// Only this layer.
        #[arg(long)]
        layer: Option<String>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run one layer's GEMM on the simulated datapath.
    Simulate {
        /// Quantized weights (.fgq).
        weights: PathBuf,
        /// Input activations (.fgq, or .fgt quantized with --layer's threshold).
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Layer whose activation threshold quantizes an .fgt input.
        #[arg(long)]
        layer: Option<String>,
        /// Quantize the output for this layer's input on the post-processing unit.
        #[arg(long)]
        next_layer: Option<String>,
        #[arg(long, default_value_t = 16)]
        lanes: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate traces and .fgq files into one cost report.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Config supplying energy coefficients.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write key=value records to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe an .fgt, .fgq or trace file.
    Inspect { file: PathBuf },
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(r) if (0.0..=1.0).contains(&r) => Ok(r),
        _ => Err(format!("{s:?} is not a ratio in [0, 1]")),
    }
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    match s {
        "fisher" => Ok(Policy::Fisher),
        "qe" => Ok(Policy::Qe),
        "oe" => Ok(Policy::Oe),
        _ => Err(format!("unknown policy {s:?}; expected fisher, qe or oe")),
    }
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    match s {
        "local" => Ok(Scope::Local),
        "global" => Ok(Scope::Global),
        _ => Err(format!("unknown scope {s:?}; expected local or global")),
    }
}

fn parse_clip(s: &str) -> Result<ClipMode, String> {
    match s {
        "sw" => Ok(ClipMode::Sw),
        "dynmax" => Ok(ClipMode::Dynmax),
        _ => Err(format!("unknown clip mode {s:?}; expected sw or dynmax")),
    }
}

/// Reads the thread cap; `None` leaves the pool at its default size.
pub fn thread_cap(value: Option<&str>) -> CliResult<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Calibrate {
            config,
            ratio,
            policy,
            scope,
            clip,
            out: dest,
        } => {
            let o = Overrides {
                ratio,
                policy,
                scope,
                clip,
            };
            commands::calibrate(&config, &o, dest.as_deref(), out)
        }
        Command::Quantize {
            config,
            layer,
            out: dir,
        } => commands::quantize(&config, layer.as_deref(), &dir, out),
        Command::Simulate {
            weights,
            input,
            config,
            layer,
            next_layer,
            lanes,
            out: dir,
        } => commands::simulate(
            &SimulateArgs {
                weights: &weights,
                input: &input,
                config: config.as_deref(),
                layer: layer.as_deref(),
                next_layer: next_layer.as_deref(),
                lanes,
                out_dir: &dir,
            },
            out,
        ),
        Command::Report {
            files,
            config,
            out: dest,
        } => commands::report(&files, config.as_deref(), dest.as_deref(), out),
        Command::Inspect { file } => commands::inspect(&file, out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let threads = match thread_cap(std::env::var(THREADS_ENV).ok().as_deref()) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(n) = threads {
        // Fails only if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
