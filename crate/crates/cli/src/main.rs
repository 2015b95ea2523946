use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use veloop::harness::ReportFormat;
use veloop_cli::{cmd_diagnose, cmd_report, cmd_resume, cmd_run, cmd_simulate, CliError, Overrides};

#[derive(Parser)]
#[command(name = "veloop", version, about = "Multi-agent visual-evidence refinement pipeline")]
struct Cli {
    /// Override the pipeline seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override worker parallelism.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Override a config leaf, e.g. `--set pipeline.tau=0.9`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the summarize/regenerate/refine loop over a dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Continue an interrupted run.
    Resume {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Render a finished run's stage metrics.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
    /// Single-model probes: decouple, supervise:<mode>, reflect:<answer|ve>.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the stochastic ensemble simulation.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, parallelism: cli.parallelism, set: cli.set };
    match cli.command {
        Command::Run { config, dataset, out, run_id } => {
            let outcome = cmd_run(&config, &dataset, &out, run_id.as_deref(), &overrides)?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Resume { run_dir } => {
            let outcome = cmd_resume(&run_dir, &overrides)?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Report { run_dir, format } => {
            let format = format.parse::<ReportFormat>().map_err(|e| CliError::Config(e.to_string()))?;
            print!("{}", cmd_report(&run_dir, format)?);
        }
        Command::Diagnose { config, dataset, mode, out } => {
            let dir = cmd_diagnose(&config, &dataset, &mode, &out, &overrides)?;
            println!("{}", dir.join("diagnostics_report.md").display());
        }
        Command::Simulate { config, out } => {
            let dir = cmd_simulate(config.as_deref(), &out, &overrides)?;
            println!("{}", dir.join("summary.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
