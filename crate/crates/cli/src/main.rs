//! `lcpo`: dataset generation, training, verification suites and ablations.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 numeric failure.

mod commands;
mod config;
mod suites;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_ablate, cmd_generate, cmd_train, default_out, write_file, CliError};
use config::RunConfig;
use suites::{run_suite, Report, Suite, PUBLISHED_SEED};

#[derive(Parser)]
#[command(name = "lcpo", version, about = "Latent collective preference optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(Common),
    /// Train with LCPO and write per-epoch metrics and the final state.
    Train(Common),
    /// Run a verification suite and write a JSON report.
    Verify(Common),
    /// Sweep the initial reliability and the EMA rate.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    suite: Option<String>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        match &self.config {
            Some(path) => Ok(RunConfig::load(path, self.seed)?),
            None => Ok(RunConfig::parse("", self.seed)?),
        }
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(default_out)
    }
}

fn verify(args: &Common) -> Result<(), CliError> {
    let name = args.suite.as_deref().ok_or_else(|| CliError::Config("suite: --suite is required".into()))?;
    let suite: Suite = name.parse().map_err(|e| CliError::Config(format!("suite: {e}")))?;
    let config = args.config()?;
    let seed = args.seed.unwrap_or(PUBLISHED_SEED);
    let checks = run_suite(suite, seed).map_err(CliError::Numeric)?;
    let pass = checks.iter().all(|c| c.pass);
    let report = Report { suite, checks, pass, seed, config_hash: config.hash() };
    let path = args.out().join(format!("verify_{}.json", suite.name().to_ascii_lowercase()));
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&path, &json)?;
    for c in &report.checks {
        println!("{} {}: {:.3e} (threshold {:.3e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.measured, c.threshold);
    }
    if pass {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        Err(CliError::Verification(format!("{suite}: {}", failed.join("; "))))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&a.config()?, &a.out()),
        Command::Train(a) => cmd_train(&a.config()?, a.dataset.as_deref(), &a.out()),
        Command::Verify(a) => verify(a),
        Command::Ablate(a) => cmd_ablate(&a.config()?, a.dataset.as_deref(), &a.out()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lcpo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
