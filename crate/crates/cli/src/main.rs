//! `ptpm` command line: synthetic data generation, training, evaluation,
//! method comparison, and the tree-depth sweep.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptpm::Error;

mod commands;

#[derive(Parser)]
#[command(name = "ptpm", version, about = "Tree-based progressive watch-time regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic watch-time dataset as CSV.
    GenData(commands::GenDataArgs),
    /// Train a model and write a checkpoint plus its evaluation metrics.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval(commands::EvalArgs),
    /// Train several methods on shared settings and tabulate them.
    Compare(commands::CompareArgs),
    /// Retrain across global-tree depths and report XAUC and learned depth.
    SweepDepth(commands::SweepDepthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Compare(args) => commands::compare(args),
        Command::SweepDepth(args) => commands::sweep_depth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) => 2,
                Error::Data(_) => 3,
                Error::Numerical(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
