use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsqlora_cli::config::Overrides;
use tsqlora_cli::{CliError, Common};

#[derive(Parser)]
#[command(name = "tsqlora", version, about = "Quality-weighted, sensitivity-allocated low-rank adapter training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed` (and the data seed unless the config pins it).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for quality scoring.
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn common(self) -> Common {
        Common {
            config: self.config,
            out: self.out,
            overrides: Overrides {
                seed: self.seed,
                threads: self.threads,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and write metrics, ranks and quality reports.
    Train(RunArgs),
    /// Score the training pool at initialization without training.
    Score(RunArgs),
    /// Compare the full method with sensitivity-off runs over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        n_seeds: usize,
    },
    /// Full method against fixed-rank training at equal rank budget.
    Compare(RunArgs),
    /// Re-render CSV reports from an existing metrics.jsonl.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TSQ_LOG", "warn")).init();
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Train(a) => tsqlora_cli::cmd_train(&a.common()).map(|o| {
            println!("{} accuracy {:.4}", o.run_id, o.report.accuracy);
        }),
        Command::Score(a) => tsqlora_cli::cmd_score(&a.common()).map(|rows| {
            println!("scored {} samples", rows.len());
        }),
        Command::Ablate { run, n_seeds } => tsqlora_cli::cmd_ablate(&run.common(), n_seeds).map(|r| {
            println!(
                "full {:.4} no-sensitivity {:.4} delta {:+.4}",
                r.mean_full(),
                r.mean_no_sensitivity(),
                r.mean_delta()
            );
        }),
        Command::Compare(a) => tsqlora_cli::cmd_compare(&a.common()).map(|rows| {
            for r in rows {
                println!("{} accuracy {:.4} params {}", r.arm, r.accuracy, r.max_trainable_params);
            }
        }),
        Command::Report { out } => tsqlora_cli::cmd_report(&out).map(|(noisy, clean)| {
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("mean q: noisy {} clean {}", fmt(noisy), fmt(clean));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tsqlora: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
