use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use linmdp::harness::{exit_code, run_experiment, slope_fit};
use linmdp::verify;
use linmdp::Error;

#[derive(Parser)]
#[command(name = "simulate", about = "Run learning experiments on linear MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment config.
    Run {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// `key.path=value`, may be repeated.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Run the invariant suites.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Log-log slope of a CSV column against K (or episode).
    Slope { csv: PathBuf, column: String },
}

fn sim_seed() -> Result<Option<u64>, Error> {
    match std::env::var("SIM_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("SIM_SEED={s:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { config, jobs, overrides } => {
            let out = run_experiment(&config, &overrides, sim_seed()?, jobs)?;
            for r in &out.runs {
                let tag = if r.passed { "ok" } else { "FAIL" };
                println!("{tag}\tseed={}\t{}\t{}", r.seed, r.message, r.dir.display());
            }
            for s in &out.suites {
                println!("{}\t{}/{} passed\t{}", if s.passed() { "ok" } else { "FAIL" }, s.checks - s.failures, s.checks, s.name);
            }
            Ok(out.all_passed())
        }
        Command::Verify { seed } => {
            let seed = sim_seed()?.unwrap_or(seed);
            let suites = verify::run_all(seed)?;
            for s in &suites {
                println!("{}\t{}/{} passed\t{}", if s.passed() { "ok" } else { "FAIL" }, s.checks - s.failures, s.checks, s.name);
            }
            Ok(suites.iter().all(|s| s.passed()))
        }
        Command::Slope { csv, column } => {
            let fit = slope_fit(&csv, &column)?;
            println!("slope={} intercept={} residual={}", fit.slope, fit.intercept, fit.residual);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
