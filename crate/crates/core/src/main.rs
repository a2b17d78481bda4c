use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedal::active::Strategy;
use fedal::harness::{
    ablation_mode, emit_report, parse_config, read_summary, run_matrix, Overrides,
};
use fedal::FedAlError;

#[derive(Parser)]
#[command(name = "fedal", version, about = "Federated active learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy and baseline over all seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to these strategies (repeatable).
        #[arg(long = "strategy")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Use seeds 0..N.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep local, global and ensemble entropy over the ablation ratios.
    Ablation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a summary.json as a table.
    Report { summary: PathBuf },
}

const EXIT_ARM_FAILED: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (config, overrides, ablation) = match cli.command {
        Command::Report { summary } => {
            return match read_summary(&summary) {
                Ok(s) => {
                    emit_report(&s, &mut std::io::stdout().lock()).ok();
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_ARM_FAILED)
                }
            };
        }
        Command::Run {
            config,
            strategies,
            gamma,
            seeds,
            out,
        } => (
            config,
            Overrides {
                strategies,
                gamma,
                seeds,
                out_dir: out,
            },
            false,
        ),
        Command::Ablation { config } => (config, Overrides::default(), true),
    };

    let cfg = match parse_config(&config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let outcome = if ablation {
        ablation_mode(&cfg)
    } else {
        run_matrix(&cfg)
    };
    match outcome {
        Ok(o) => {
            emit_report(&o.summary, &mut std::io::stdout().lock()).ok();
            println!("results written to {}", o.out_dir.display());
            if o.failed() {
                ExitCode::from(EXIT_ARM_FAILED)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e @ FedAlError::Config(_))
        | Err(e @ FedAlError::Parse { .. })
        | Err(e @ FedAlError::Schema { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_BAD_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ARM_FAILED)
        }
    }
}
