use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qfpme_cli::config::env_overrides;
use qfpme_cli::{run_experiment, CliError, ConfigFile, Experiment, ExperimentConfig};

/// Measurement-feedback thermodynamics experiments.
///
/// Keys may be overridden with QFPME_<KEY> environment variables, e.g. QFPME_N_TRAJ=1000.
#[derive(Parser, Debug)]
#[command(name = "qfpme", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spectral steady state and closed-form energetics.
    Steady(Common),
    /// Finite-volume steady state of the full joint equation.
    Grid(Common),
    /// Sample trajectories with first-law ledgers.
    Traj(Common),
    /// Fluctuation-theorem ensemble at one parameter point.
    Ft(Common),
    /// Reproduce one figure's data set.
    Figure {
        /// fig2, fig3, fig4, fig5 or fig6
        tag: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value file with optional [tag] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn resolve(experiment: Experiment, common: &Common) -> Result<ExperimentConfig, CliError> {
    let file = match &common.config {
        Some(path) => Some(ConfigFile::parse(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let env = env_overrides(std::env::vars())?;
    let mut flags = BTreeMap::new();
    if let Some(s) = common.seed {
        flags.insert("seed".to_string(), s.to_string());
    }
    if let Some(o) = &common.out {
        flags.insert("out".to_string(), o.display().to_string());
    }
    if let Some(t) = common.threads {
        flags.insert("threads".to_string(), t.to_string());
    }
    ExperimentConfig::resolve(experiment, file.as_ref(), &env, &flags)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (experiment, common) = match &cli.command {
        Command::Steady(c) => (Experiment::Steady, c),
        Command::Grid(c) => (Experiment::Grid, c),
        Command::Traj(c) => (Experiment::Traj, c),
        Command::Ft(c) => (Experiment::Ft, c),
        Command::Figure { tag, common } => {
            let e = Experiment::from_tag(tag)?;
            if !e.is_figure() {
                return Err(CliError::config("tag", format!("`{tag}` is not a figure tag")));
            }
            (e, common)
        }
    };
    let cfg = resolve(experiment, common)?;
    let summary = run_experiment(&cfg)?;
    for path in &summary.csv {
        println!("{}", path.display());
    }
    println!("{}", summary.sidecar.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
