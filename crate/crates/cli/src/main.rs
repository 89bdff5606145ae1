use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedsim::sweep::GroupBy;
use fedsim_cli::{commands, RunConfig};

#[derive(Parser)]
#[command(version, about = "Deterministic FedAvg simulation over hospital cohorts")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "fedsim.toml")]
    config: PathBuf,
    /// Worker threads for client training; overrides `workers` in the config.
    #[arg(long, global = true, env = fedsim::executor::WORKERS_ENV)]
    workers: Option<usize>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as CSV.
    Generate,
    /// Cohort statistics for every configured scenario.
    Scenario,
    /// One federated run; writes per-round results and the final model.
    Train {
        /// Scenario label to train on when several are configured.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Run the (scenario, E, C, B, repeat) grid and write reports.
    Sweep {
        /// Rerun cells already present in the result store.
        #[arg(long)]
        force: bool,
    },
    /// Rebuild report CSVs from the result store.
    Report {
        #[arg(long, value_enum)]
        group_by: Option<Grouping>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Grouping {
    E,
    Bc,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Scenario => commands::scenario(&cfg),
        Command::Train { scenario } => {
            let ex = commands::executor(&cfg, cli.workers)?;
            commands::train(&cfg, &ex, scenario.as_deref())
        }
        Command::Sweep { force } => {
            let ex = commands::executor(&cfg, cli.workers)?;
            commands::sweep(&cfg, &ex, force)
        }
        Command::Report { group_by } => commands::report(
            &cfg,
            group_by.map(|g| match g {
                Grouping::E => GroupBy::Epochs,
                Grouping::Bc => GroupBy::BatchAndFraction,
            }),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
