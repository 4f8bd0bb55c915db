//! `tab3d` — zero-shot 3D visual grounding from the command line.
//!
//! Three subcommands cover the full workflow: `simulate` renders a synthetic
//! RGB-D orbit so the pipeline can be exercised without real captures,
//! `ground` localizes the object a query describes and writes its box, and
//! `eval` scores prediction files against labelled boxes.
//!
//! All commands are idempotent: outputs are plain files under the chosen
//! directory, byte-identical across re-runs except for timestamps, which are
//! confined to the `meta` field of evaluation reports. Diagnostics go to
//! stderr; stdout carries only results.
//!
//! Exit codes: 0 for a completed run, 2 when the agent abandons a query
//! (an `Abort` step in the trace), 1 for I/O, schema, or configuration
//! errors.

mod eval;
mod ground;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tab3d", version, about = "Zero-shot 3D visual grounding over posed RGB-D scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize the object a query describes and write its 3D bounding box.
    Ground(ground::GroundArgs),
    /// Render a synthetic RGB-D scene from a JSON spec.
    Simulate(simulate::SimulateArgs),
    /// Score prediction files against ground-truth boxes.
    Eval(eval::EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Ground(args) => ground::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Eval(args) => eval::run(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
