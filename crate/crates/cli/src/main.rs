mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, PipelineConfig};

/// Diversity-aware channel pruning pipeline for small style-based
/// generators.
#[derive(Debug, Parser)]
#[command(name = "dcp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a teacher generator on the procedural blob dataset.
    TrainTeacher(Overrides),
    /// Extract latent directions (PCA or random) from a teacher.
    Directions(Overrides),
    /// Score every synthesis channel of a teacher.
    Score(Overrides),
    /// Build a pruning plan from scores and cut the student out of the teacher.
    Prune(Overrides),
    /// Distill a pruned student towards its teacher.
    Distill(Overrides),
    /// Fidelity, diversity and cost metrics for a teacher/student pair.
    Eval(Overrides),
    /// Print the header of a checkpoint or direction file.
    Inspect {
        path: PathBuf,
    },
}

fn run(cmd: Command) -> anyhow::Result<()> {
    let resolve = |o: &Overrides| PipelineConfig::resolve(o);
    match cmd {
        Command::TrainTeacher(o) => commands::train_teacher_cmd(&resolve(&o)?),
        Command::Directions(o) => commands::directions_cmd(&resolve(&o)?),
        Command::Score(o) => commands::score_cmd(&resolve(&o)?),
        Command::Prune(o) => commands::prune_cmd(&resolve(&o)?),
        Command::Distill(o) => commands::distill_cmd(&resolve(&o)?),
        Command::Eval(o) => {
            println!("{}", commands::eval_cmd(&resolve(&o)?)?);
            Ok(())
        }
        Command::Inspect { path } => {
            println!("{}", commands::inspect_cmd(&path)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCP_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
