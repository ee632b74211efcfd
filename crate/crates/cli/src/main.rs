use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cascade_cli::{load_config, run_command, CliError, Command};
use clap::{Parser, Subcommand};

/// Token-sharded inference: verification, byte accounting and attacks.
#[derive(Debug, Parser)]
#[command(name = "cascade", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the JSON report (stdout if absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `run.trials`.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Also write a flat CSV table here.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Protocol logits vs the unsharded model.
    Verify,
    /// Measured vs predicted communication.
    Bench,
    /// Vocab-matching and layer-0 attacks from each CompNode.
    Attack,
    /// Gap profiles, feasibility and pairwise collusion.
    SecurityReport,
    /// KV-cached generation checked against uncached and greedy decoding.
    Generate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Verify => Command::Verify,
            Cmd::Bench => Command::Bench,
            Cmd::Attack => Command::Attack,
            Cmd::SecurityReport => Command::SecurityReport,
            Cmd::Generate => Command::Generate,
        }
    }
}

/// Exit 1: bad config or failed run. Exit 2: ran, but missed a threshold.
fn run(cli: Cli) -> anyhow::Result<bool> {
    let path = cli.config.context("--config <path> is required")?;
    let mut config = load_config(&path)?;
    if let Some(t) = cli.trials {
        config.run.trials = t;
        config.validate().map_err(|e: CliError| anyhow::anyhow!(e))?;
    }
    let command = Command::from(cli.command);
    let report = run_command(&config, command)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &cli.out {
        Some(out) => std::fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?,
        None => println!("{json}"),
    }
    if let Some(csv) = &cli.csv {
        report.table.write_csv(csv).with_context(|| format!("writing {}", csv.display()))?;
    }
    eprintln!("{command}: {}", if report.pass { "pass" } else { "FAIL" });
    Ok(report.pass)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
