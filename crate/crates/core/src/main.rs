use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use wildgas::config::{ExperimentConfig, Scenario};
use wildgas::runner::{exit_code, run};
use wildgas::Error;

/// Experiment runner for wild and dissipative solutions of the Euler-Fourier system.
#[derive(Parser, Debug)]
#[command(name = "wildgas", version)]
struct Cli {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for the random audits; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario to run; overrides the config.
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scenario {
        cfg.scenario = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(t) = std::env::var("WILDGAS_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: WILDGAS_THREADS must be a positive integer, got '{t}'");
                return ExitCode::from(1);
            }
        }
    }
    let result = load(&cli).and_then(|cfg| run(&cfg, &cli.out));
    match result {
        Ok(outcome) => {
            println!("{:?}: ok ({} files in {})", outcome.scenario, outcome.files.len(), cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
