//! `psmi`: run, validate and report propensity-score matching simulations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use psmi_core::harness::{self, HarnessError, ReportFormat, ScenarioConfig};

#[derive(Parser)]
#[command(name = "psmi", version, about = "Propensity-score matching with multiply imputed confounders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write replicates.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        nsim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = all cores).
        #[arg(long, env = "PSMI_PARALLELISM")]
        parallelism: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and plot data from one or more result directories.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Where scatter.csv and variance_ratio.csv go; defaults to the first input.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Check a config and print the calibrated intercepts.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

fn load(config: &Path, nsim: Option<usize>, seed: Option<u64>, parallelism: Option<usize>, out: Option<PathBuf>) -> Result<ScenarioConfig, HarnessError> {
    let mut cfg = harness::load_config(config)?;
    if let Some(n) = nsim {
        cfg.nsim = n;
    }
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(p) = parallelism {
        cfg.parallelism = p;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, nsim, seed, parallelism, out } => {
            let cfg = load(&config, nsim, seed, parallelism, out)?;
            let result = harness::run_scenario(&cfg)?;
            let rep = harness::report(std::slice::from_ref(&result), ReportFormat::Table)?;
            print!("{}", rep.main);
            eprintln!("results in {} ({:.1}s)", cfg.output_dir.display(), result.wall_clock_seconds);
        }
        Command::Report { dirs, format, plot_dir } => {
            let results = dirs.iter().map(|d| harness::load_result(d)).collect::<Result<Vec<_>, _>>()?;
            let fmt = match format {
                Format::Table => ReportFormat::Table,
                Format::Csv => ReportFormat::Csv,
            };
            let rep = harness::report(&results, fmt)?;
            print!("{}", rep.main);
            let dir = plot_dir.unwrap_or_else(|| dirs[0].clone());
            for (name, body) in [("scatter.csv", &rep.scatter_csv), ("variance_ratio.csv", &rep.variance_ratio_csv)] {
                let path = dir.join(name);
                fs::write(&path, body).map_err(|source| HarnessError::Io { path, source })?;
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config, None, None, None, None)?;
            let c = harness::calibrate(&cfg)?;
            println!("scenario: {}", cfg.label);
            println!("strategies: {}", cfg.strategies.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
            println!("alpha0: {:.10}", c.alpha0);
            println!("gamma0 (replicate 0): {:.10}", c.gamma0);
            if let Some(e) = c.eps0 {
                println!("eps0 (replicate 0): {e:.10}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
