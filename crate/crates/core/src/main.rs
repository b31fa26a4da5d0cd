use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsampler::harness::{self, UnbiasedCheck};
use fedsampler::sampling::{Replacement, Strategy};
use fedsampler::Result;

/// Federated client-sampling simulator.
#[derive(Parser, Debug)]
#[command(name = "fedsampler", version)]
struct Cli {
    /// Worker threads for local training.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,

    /// Overrides the output directory of `run` and `sweep`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment config, one CSV per seed.
    Run { config: PathBuf },
    /// Print the three-client toy comparison.
    Toy,
    /// Monte-Carlo check that a strategy's estimator is unbiased.
    CheckUnbiased {
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value_t = 3)]
        cohort: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value = "fedis")]
        strategy: Strategy,
        #[arg(long, default_value = "without")]
        replacement: Replacement,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every `.conf` file in a directory.
    Sweep { dir: PathBuf },
}

fn execute(cli: Cli) -> Result<bool> {
    let threads = cli.threads as usize;
    let output = cli.output.as_deref();
    match cli.command {
        Command::Run { config } => {
            for path in harness::cmd_run(&config, output, threads)? {
                println!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Sweep { dir } => {
            for path in harness::cmd_sweep(&dir, output, threads)? {
                println!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Toy => {
            let report = harness::toy_report();
            println!("{report}");
            Ok(report.ordering_holds())
        }
        Command::CheckUnbiased {
            clients,
            cohort,
            draws,
            strategy,
            replacement,
            seed,
        } => {
            let report = harness::check_unbiased(UnbiasedCheck {
                clients,
                cohort,
                draws,
                strategy,
                replacement,
                seed,
            })?;
            println!("{report}");
            // a FAIL is a finding, not an error
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // bad arguments count as a configuration error
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
