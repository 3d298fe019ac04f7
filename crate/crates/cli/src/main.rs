//! `lattice-gas`: command-line driver for the experiments in the `lattice_gas` crate.
//!
//! Every subcommand reads one JSON experiment config and writes its artifacts
//! under `{output}/{experiment}/`. Exit status: 0 on success, 1 when a run
//! breaches an invariant or a configured tolerance, 2 for an invalid config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lattice_gas::exec::init_workers_from_env;
use lattice_gas::harness::{self, ComparisonReport, ExperimentConfig, ORACLE_PRODUCT_TOLERANCE};
use lattice_gas::{Error, Execution};

#[derive(Parser)]
#[command(name = "lattice-gas", version, about = "Boundary-driven lattice gas in a random medium")]
struct Cli {
    /// Run every fan-out on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and store the quenched fields for every size and disorder sample.
    GenDisorder(ConfigArg),
    /// Estimate the diffusion matrix table from the variational formula.
    EstimateDiffusion(ConfigArg),
    /// Hydrodynamic run: simulate from the initial profile and compare with the PDE.
    Simulate(ConfigArg),
    /// Solve the PDE alone, with the monotone envelope and the steady state.
    PdeSolve(ConfigArg),
    /// Hydrostatic run: stationary profiles against the steady state, plus the Fick fit.
    Hydrostatic(ConfigArg),
    /// Exact stationary law on the smallest configured lattice.
    Oracle(ConfigArg),
    /// L1 distance between the replica-averaged trajectories of two `simulate` runs.
    Compare {
        #[command(flatten)]
        config: ConfigArg,
        /// Config of the second run.
        #[arg(long)]
        against: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    match ExperimentConfig::from_path(path) {
        Ok(c) => Ok(c),
        Err(Error::Io(e)) => Err(Failure::Run(format!("cannot read {}: {e}", path.display()))),
        Err(e) => Err(Failure::Config(e)),
    }
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn verdict(report: &ComparisonReport) -> Result<(), Failure> {
    for row in report.averaged() {
        let se = row.stderr.map(|s| format!(" +- {s:.3e}")).unwrap_or_default();
        println!("N={} t={} L1={:.6e}{se}", row.n, row.time, row.l1);
    }
    for fit in &report.fick {
        match &fit.pooled {
            Some(p) => println!(
                "N={} Fick median ratio {:.4}, fitted/variational D_11 = {:.4}{}",
                fit.n,
                p.median_ratio,
                p.d11_ratio,
                p.d11_ratio_stderr.map(|s| format!(" +- {s:.4}")).unwrap_or_default()
            ),
            None => println!("N={} Fick fit skipped: {}", fit.n, fit.reason.as_deref().unwrap_or("")),
        }
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    match report.passed {
        Some(false) => Err(Failure::Run(report.failures.join("; "))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let execution = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::GenDisorder(a) => {
            let config = load(&a.config)?;
            list(&harness::write_disorder(&config)?);
        }
        Command::EstimateDiffusion(a) => {
            let config = load(&a.config)?;
            let (table, paths) = harness::write_diffusion(&config, execution)?;
            let meta = table.metadata();
            println!("Einstein constant C = {:.6}", meta.einstein_constant);
            let worst = meta.condition_numbers.iter().cloned().fold(0.0, f64::max);
            println!("largest condition number = {worst:.6}");
            list(&paths);
        }
        Command::Simulate(a) => {
            let config = load(&a.config)?;
            let run = harness::run_hydrodynamic(&config, execution)?;
            list(&harness::write_hydrodynamic(&config, &run)?);
            verdict(&run.report)?;
        }
        Command::PdeSolve(a) => {
            let config = load(&a.config)?;
            let run = harness::run_pde(&config, execution)?;
            list(&harness::write_pde(&config, &run)?);
            let s = &run.summary;
            println!("steps = {}, dt = {:.6e}", s.steps, s.time_step);
            if let Some((t, gap)) = s.envelope_gaps.last() {
                println!("envelope gap at t={t}: {gap:.6e}");
            }
        }
        Command::Hydrostatic(a) => {
            let config = load(&a.config)?;
            let run = harness::run_hydrostatic(&config, execution)?;
            list(&harness::write_hydrostatic(&config, &run)?);
            for b in &run.report.burn_in {
                println!(
                    "N={} burn-in {} over {} stage(s), flux stationary: {:?}",
                    b.n, b.burn_in, b.stages, b.flux_stationary
                );
            }
            verdict(&run.report)?;
        }
        Command::Oracle(a) => {
            let config = load(&a.config)?;
            let report = harness::run_oracle(&config, execution)?;
            list(&harness::write_oracle(&config, &report)?);
            println!(
                "{} sites, {} states, residual {:.3e} after {} iterations",
                report.sites, report.states, report.residual, report.iterations
            );
            if let Some(err) = report.product_error {
                println!("max|nu_exact - nu_product| = {err:.3e}");
                if !(err <= ORACLE_PRODUCT_TOLERANCE) {
                    return Err(Failure::Run(format!(
                        "stationary law differs from the product measure by {err:e} > {ORACLE_PRODUCT_TOLERANCE:e}"
                    )));
                }
            }
        }
        Command::Compare { config, against } => {
            let a = load(&config.config)?;
            let b = load(&against)?;
            let rows = harness::compare_runs(&a, &b)?;
            for r in &rows {
                println!("N={} t={} L1={:.6e}", r.n, r.time, r.l1);
            }
            list(&harness::write_compare(&a, &b, &rows)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_workers_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
