use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use concentration_lab::harness::{load_config, run, Command, HarnessError, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    VerifyTheorem1,
    Ledger,
    Deviation,
    Sparsify,
    Iterate,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::VerifyTheorem1 => Command::VerifyTheorem1,
            Sub::Ledger => Command::Ledger,
            Sub::Deviation => Command::Deviation,
            Sub::Sparsify => Command::Sparsify,
            Sub::Iterate => Command::Iterate,
        }
    }
}

/// Concentration checks on product spaces and subspace sparsification.
#[derive(Debug, Parser)]
#[command(name = "conclab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "conclab-out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("conclab: {e}");
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let command = Command::from(cli.command);
    match run(command, &cfg, &cli.out) {
        Ok(report) => {
            let s = &report.summary;
            println!(
                "{}: {}/{} checks passed; report in {}",
                command.name(),
                s.passed,
                s.checks,
                cli.out.join(format!("{}.json", command.name())).display()
            );
            for c in report.checks.iter().filter(|c| !c.pass) {
                println!("  FAIL {}", c.name);
            }
            ExitCode::from(if s.pass { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("conclab: {e}");
            ExitCode::from(match e {
                HarnessError::Config(_) => 2,
                HarnessError::Internal(_) => 3,
            })
        }
    }
}
