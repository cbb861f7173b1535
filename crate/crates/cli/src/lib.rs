//! Argument surface and dispatch for the `matteforge` binary.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};

pub use config::CliError;

/// Trimap-free portrait matting: synthesize data, train, adapt to new
/// footage, evaluate, and post-process videos.
#[derive(Debug, Parser)]
#[command(name = "matteforge", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic portrait dataset with ground-truth mattes
    Gen(commands::GenArgs),
    /// Train a matting model on a generated dataset
    Train(commands::TrainArgs),
    /// Adapt a trained model to unlabeled images from another domain
    Adapt(commands::AdaptArgs),
    /// Score a checkpoint and time its forward pass
    Eval(commands::EvalArgs),
    /// Remove one-frame flicker from a matte sequence
    Smooth(commands::SmoothArgs),
    /// Carve trimaps out of depth maps
    Trimap(commands::TrimapArgs),
    /// Composite mattes over a solid backdrop
    Composite(commands::CompositeArgs),
    /// Check every analytic gradient against finite differences
    Gradcheck(commands::GradcheckArgs),
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(args) => commands::gen(args),
        Command::Train(args) => commands::train(args),
        Command::Adapt(args) => commands::adapt(args),
        Command::Eval(args) => commands::eval(args),
        Command::Smooth(args) => commands::smooth(args),
        Command::Trimap(args) => commands::trimap(args),
        Command::Composite(args) => commands::composite_cmd(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
    }
}
