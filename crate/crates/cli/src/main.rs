//! `lcdet`: train, quantize, run and measure the detector from the shell.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod analyze;
mod common;
mod eval;
mod infer;
mod model_cmds;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::UsageError;

#[derive(Parser, Debug)]
#[command(name = "lcdet", version, about = "Low-complexity single-shot object detector")]
struct Cli {
    /// Worker threads for data-parallel work (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a float model on a dataset directory or synthetic scenes.
    Train(train::TrainArgs),
    /// Calibrate activation ranges and convert a float model to 8-bit.
    Quantize(model_cmds::QuantizeArgs),
    /// Run detection on images and write JSON Lines.
    Infer(infer::InferArgs),
    /// Score detections against ground truth.
    Eval(eval::EvalArgs),
    /// Report OPs, parameters, bytes and frame rate of a network.
    Analyze(analyze::AnalyzeArgs),
    /// Frame rate under every bandwidth of a scenario file.
    Sweep(analyze::SweepArgs),
    /// Write a synthetic rectangle dataset to disk.
    Synth(train::SynthArgs),
    /// Write a randomly initialized model.
    Init(model_cmds::InitArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Quantize(a) => model_cmds::quantize(a),
        Command::Infer(a) => infer::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Sweep(a) => analyze::sweep(a),
        Command::Synth(a) => train::synth(a),
        Command::Init(a) => model_cmds::init(a),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if threads.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; --threads is ignored");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use lcdet_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Usage(_) | E::Config { .. } | E::Unsupported(_) => 1,
                E::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}
