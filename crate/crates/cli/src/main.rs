use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqjde::cli_io::{
    cmd_compare, cmd_design, cmd_diagnostics, cmd_evaluate, cmd_policy_map, exit_code, CoefficientFile, Experiment,
    ExperimentConfig, PolicyKind,
};
use seqjde::{Error, Result};

/// Sequential joint detection and estimation experiments.
#[derive(Debug, Parser)]
#[command(name = "seqjde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Design the cost coefficients and write coefficients.toml.
    Design {
        #[command(flatten)]
        common: Common,
        /// Monte Carlo runs per iteration.
        #[arg(long)]
        runs: Option<u64>,
    },
    /// Evaluate one policy by Monte Carlo.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<u64>,
        /// ao or two_step.
        #[arg(long, default_value = "ao")]
        policy: PolicyKind,
        /// Coefficient file written by `design` (needed for ao).
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
    /// Export the AO stop/continue regions over (n, xbar).
    PolicyMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        coeffs: PathBuf,
    },
    /// Evaluate both policies and write merged tables.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long)]
        coeffs: PathBuf,
    },
    /// Fisher information, KL divergences, cost limits, and spot checks.
    Diagnostics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
}

fn load(common: &Common, design_runs: Option<u64>, sim_runs: Option<u64>) -> Result<(Experiment, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = design_runs {
        cfg.design.runs_per_iter = runs;
    }
    if let Some(runs) = sim_runs {
        cfg.simulation.runs = runs;
    }
    let exp = Experiment::new(cfg)?;
    let out = exp.output_dir(common.out.as_deref());
    Ok((exp, out))
}

fn read_coeffs(path: Option<&Path>) -> Result<Option<CoefficientFile>> {
    path.map(CoefficientFile::read).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Design { common, runs } => {
            let (exp, out) = load(&common, runs, None)?;
            let report = cmd_design(&exp, &out)?;
            for rec in &report.outcome.history {
                eprintln!("iteration {:>3}: max normalized violation {:.3}", rec.k, rec.violation);
            }
            println!("wrote {}", report.coefficients_path.display());
            if !report.outcome.converged {
                return Err(Error::NotConverged {
                    iterations: report.outcome.iterations,
                    violation: report.outcome.violation(),
                });
            }
        }
        Command::Evaluate { common, runs, policy, coeffs } => {
            let (exp, out) = load(&common, None, runs)?;
            let file = read_coeffs(coeffs.as_deref())?;
            let table = cmd_evaluate(&exp, policy, file.as_ref(), &out)?;
            print!("{table}");
        }
        Command::PolicyMap { common, coeffs } => {
            let (exp, out) = load(&common, None, None)?;
            let file = CoefficientFile::read(&coeffs)?;
            let map = cmd_policy_map(&exp, &file, &out)?;
            for (a, b) in [(0, 1), (1, 2)] {
                let (a, b) = (seqjde::HypothesisId::new(a), seqjde::HypothesisId::new(b));
                match map.corridor_closure(a, b) {
                    Some(n) => println!("{a}/{b} corridor closed from n = {n}"),
                    None => println!("{a}/{b} corridor still open at the end of the grid"),
                }
            }
            println!("wrote {}", out.join("policy_map.csv").display());
        }
        Command::Compare { common, runs, coeffs } => {
            let (exp, out) = load(&common, None, runs)?;
            let file = CoefficientFile::read(&coeffs)?;
            let table = cmd_compare(&exp, &file, &out)?;
            print!("{table}");
        }
        Command::Diagnostics { common, coeffs } => {
            let (exp, _) = load(&common, None, None)?;
            let file = read_coeffs(coeffs.as_deref())?;
            print!("{}", cmd_diagnostics(&exp, file.as_ref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
