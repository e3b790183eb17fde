//! `tirdet`: synthesize data, train, evaluate, detect and inspect models.
//!
//! Exit codes: 0 on success, 2 for usage, configuration or input errors,
//! 3 for failures at run time.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tirdet::Error;

#[derive(Parser)]
#[command(name = "tirdet", version, about = "Thermal-infrared vehicle detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Scratch,
    Transfer,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    T1,
    T2,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Modified,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector; writes checkpoints, the run log and the effective
    /// config into the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        img: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score a checkpoint, or a file of precomputed detections, on the
    /// test splits of one or both protocols.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        /// JSON-lines detections in source-image pixels.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint over an image or a directory of PNGs.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        nms_iou: Option<f64>,
    },
    /// Print parameter count, FLOPs and layer shapes of a model.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        img: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Self { code: 3, msg: e.to_string() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Protocol(_) | Error::Load(_) => 2,
            _ => 3,
        };
        Self { code, msg: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { config, out, n, seed } => commands::synth(config.as_deref(), &out, n, seed),
        Cmd::Train { config, out, manifest, epochs, batch, img, seed, mode, weights } => commands::train(commands::TrainArgs {
            config,
            out,
            manifest,
            epochs,
            batch,
            img,
            seed,
            mode,
            weights,
        }),
        Cmd::Eval { config, checkpoint, detections, manifest, protocol, seed, out } => commands::eval(commands::EvalArgs {
            config,
            checkpoint,
            detections,
            manifest,
            protocol,
            seed,
            out,
        }),
        Cmd::Detect { checkpoint, source, out, conf, nms_iou } => commands::detect(&checkpoint, &source, &out, conf, nms_iou),
        Cmd::Inspect { config, variant, classes, img, json } => commands::inspect(config.as_deref(), variant, classes, img, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
