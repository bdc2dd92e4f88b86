use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use adacomp::experiment::{self, ExperimentConfig, RunOptions, RunStatus, SweepAxis};

/// Thread count for the simulated learners.
const THREADS_VAR: &str = "ADACOMP_THREADS";

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(version, about = "Residual gradient compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat a run along one axis and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lt, minibatch or learners
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn threads() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_VAR}={v:?}"))?;
            if n == 0 {
                bail!("{THREADS_VAR} must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    flag.or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir in the config")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(adacomp::Error::InvalidConfig(_))));
            ExitCode::from(if config_error { EXIT_CONFIG } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let opts = RunOptions {
        threads: threads()?,
        progress: true,
    };
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let dir = out_dir(out, &cfg)?;
            let report = experiment::run(&cfg, Some(&dir), &opts)?;
            let summary = report.summary();
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let RunStatus::Diverged { step, rank, loss } = report.status {
                eprintln!(
                    "diverged at step {step}: loss {loss} on rank {rank}; partial metrics in {}",
                    dir.display()
                );
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let axis: SweepAxis = axis.parse()?;
            let dir = out_dir(out, &cfg)?;
            let points = experiment::sweep(&cfg, axis, &values, Some(&dir), &opts)?;
            for p in &points {
                let rate = p
                    .outcome
                    .as_ref()
                    .map(|r| r.mean_compression_rate())
                    .unwrap_or(f64::NAN);
                println!("{}={}: {} rate {rate:.2}", axis.name(), p.value, p.status());
            }
            println!("wrote {}", dir.join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
