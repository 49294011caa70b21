use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "flowreg",
    about = "Single-stage multi-view point cloud registration via conditional flow matching",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-view scenes as sample manifests
    Synth(CommonArgs),
    /// Curate training samples from a posed sequence
    Curate(CommonArgs),
    /// Cache per-view keypoints and descriptors for every manifest
    Preprocess(CommonArgs),
    /// Train the velocity model on curated manifests
    Train(CommonArgs),
    /// Register manifests with a trained checkpoint
    Register(CommonArgs),
    /// Evaluate registration outputs against manifest ground truth
    Evaluate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration JSON; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. --set sampler.steps=20
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::run("synth", args),
        Command::Curate(args) => commands::run("curate", args),
        Command::Preprocess(args) => commands::run("preprocess", args),
        Command::Train(args) => commands::run("train", args),
        Command::Register(args) => commands::run("register", args),
        Command::Evaluate(args) => commands::run("evaluate", args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
