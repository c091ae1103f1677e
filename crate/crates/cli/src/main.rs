//! `refine3d`: dataset generation, staged training, evaluation,
//! reconstruction and report charts.

mod eval;
mod gen_data;
mod reconstruct;
mod report;
mod svg;
mod train;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "refine3d", version, about = "Multi-view voxel reconstruction with attention fusion and a refiner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of rendered views and voxel ground truth.
    GenData(gen_data::Args),
    /// Train one phase, or all three in order.
    Train(train::Args),
    /// Per-category IoU tables for a range of view counts.
    Eval(eval::Args),
    /// Reconstruct a voxel grid from one or more images.
    Reconstruct(reconstruct::Args),
    /// SVG charts from a metrics CSV and an eval CSV.
    Report(report::Args),
}

/// A problem with the invocation itself (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 0 ok, 1 IO, 2 usage or bad data, 3 state, 4 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    use refine3d::Error;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => 1,
                Error::State(_) => 3,
                Error::Numeric(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("REFINE3D_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| usage(format!("REFINE3D_THREADS must be a count, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Reconstruct(a) => reconstruct::run(a),
        Command::Report(a) => report::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their source in the message
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
