use std::path::PathBuf;
use std::process::ExitCode;

use bohmflow::{list_scenarios, scenarios, CliError, ExperimentConfig, Pipeline, Stage};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bohmflow", version, about = "Bohmian trajectories in quantum scattering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evolve the initial state and write frames.
    Propagate(RunArgs),
    /// Find bound states and split ψ₀ into bound and scattering parts.
    Split(RunArgs),
    /// Compute the outgoing asymptote of the scattering part.
    Asymptote(RunArgs),
    /// Integrate the trajectory ensemble through the stored frames.
    Trajectories(RunArgs),
    /// Evaluate the claims from on-disk artifacts and write the report.
    Verify(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Print the names of the builtin scenarios.
    ListScenarios,
    /// Print the TOML of a builtin scenario.
    ExportScenario { name: String },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file, or the name of a builtin scenario.
    #[arg(short, long)]
    config: String,
    /// Output directory (takes precedence over BOHMFLOW_OUT).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Worker threads for trajectory integration and analysis.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the ensemble seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: &RunArgs, stage: Option<Stage>) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.ensemble.seed = seed;
    }
    let out = config.output_dir(args.out.as_deref());
    let pipeline = Pipeline::new(config, &out);
    let report = match stage {
        Some(stage) => pipeline.run_stage(stage)?,
        None => Some(pipeline.run_all()?),
    };
    if let Some(report) = report {
        for c in &report.claims {
            println!(
                "{} {:<24} {:>12.4e} (threshold {:.4e})",
                if c.pass { "PASS" } else { "FAIL" },
                c.id,
                c.statistic,
                c.threshold
            );
        }
        let failed = report.claims.iter().filter(|c| !c.pass).count();
        if failed > 0 {
            return Err(CliError::ClaimsFailed {
                failed,
                total: report.claims.len(),
            });
        }
    }
    eprintln!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Propagate(a) => run(a, Some(Stage::Propagate)),
        Command::Split(a) => run(a, Some(Stage::Split)),
        Command::Asymptote(a) => run(a, Some(Stage::Asymptote)),
        Command::Trajectories(a) => run(a, Some(Stage::Trajectories)),
        Command::Verify(a) => run(a, Some(Stage::Verify)),
        Command::All(a) => run(a, None),
        Command::ListScenarios => {
            for name in list_scenarios() {
                println!("{name}");
            }
            Ok(())
        }
        Command::ExportScenario { name } => match scenarios::builtin(name) {
            Some(text) => {
                print!("{text}");
                Ok(())
            }
            None => Err(CliError::Usage(format!("no builtin scenario named '{name}'"))),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
