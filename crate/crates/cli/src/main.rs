mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;
use crate::stages::Stage;

#[derive(Parser)]
#[command(name = "cefi", version, about = "Consensus-embedding federated inference pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat JSON config with dotted keys; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory shared by all stages of a run.
    #[arg(long, global = true, default_value = "cefi-out")]
    out: PathBuf,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Ensemble rule to evaluate; repeatable. Replaces the config's `rules`.
    #[arg(long = "rule", global = true)]
    rules: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the task's train and test samples.
    SynthData,
    /// Hold out the shared set and split the rest over devices.
    Partition,
    /// Train every device's tail on its local data.
    PretrainTails,
    /// Train the CE layers over the simulated network.
    TrainCe,
    /// Distil every device's model into its CO layer.
    TrainCo,
    /// Federated inference on the test set, per rule and origin device.
    Infer,
    /// Baselines and CE-FI accuracy, written as CSV.
    Evaluate,
    /// FI-equivalence and ε-perturbation checks on the trained system.
    TheoryCheck,
    /// Rebuild summary tables from results.csv, merging other run directories.
    Report { runs: Vec<PathBuf> },
    /// Every stage from synth-data to theory-check.
    Run,
    /// Print every config key with its default value.
    Defaults,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Command::Defaults = cli.command {
        print!("{}", config::describe_defaults());
        return Ok(());
    }
    let cfg = config::load(cli.config.as_deref(), cli.seed, &cli.rules)?;
    let stage = Stage::new(&cfg, &cli.out)?;
    match &cli.command {
        Command::SynthData => stage.synth_data(),
        Command::Partition => stage.partition(),
        Command::PretrainTails => stage.pretrain_tails(),
        Command::TrainCe => stage.train_ce(),
        Command::TrainCo => stage.train_co(),
        Command::Infer => stage.infer(),
        Command::Evaluate => stage.evaluate(),
        Command::TheoryCheck => stage.theory_check(),
        Command::Report { runs } => stage.report(runs),
        Command::Run => stage.run_all(),
        Command::Defaults => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("error: {e}");
            if !matches!(e, CliError::Config(_)) {
                eprintln!();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
