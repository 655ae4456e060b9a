//! `ssnas`: long-tail preparation, label-free architecture search,
//! fine-tuning, evaluation, transfer, loss ablation and report merging.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssnas_core::Error;

#[derive(Parser)]
#[command(name = "ssnas", version, about = "Self-supervised architecture search for imbalanced image data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a long-tailed subsample and write plan.json and manifest.json.
    MakeLt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        /// synthetic, cifar10:<dir> or directory:<dir>.
        #[arg(long, default_value = "synthetic")]
        source: String,
    },
    /// Label-free search; writes genotype.json, weights.bin and history.csv.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a searched architecture and evaluate it.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Directory with genotype.json and weights.bin from `search`.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// CE, CE+LA, FL or FL+LA.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Re-evaluate a fine-tuned model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory with genotype.json and weights.bin from `finetune`.
        #[arg(long)]
        from: PathBuf,
    },
    /// Move a model to another dataset with a new classifier head.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        /// Target source; defaults to the config's transfer_dataset.
        #[arg(long)]
        to: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune under all four loss modes over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Merge run reports into report.md and report.csv.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// 2 configuration, 3 data, 4 divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::BatchTooSmall(_) | Error::UnsatisfiableImbalance { .. } | Error::Structural(_) => 2,
        Error::Divergence { .. } | Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn threads_from_env() -> Result<(), Error> {
    let Ok(value) = std::env::var("SSNAS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Parameter(format!("SSNAS_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Parameter(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    threads_from_env()?;
    match cli.command {
        Command::MakeLt {
            common,
            rho,
            classes,
            per_class,
            source,
        } => commands::make_lt(&common, rho, classes, per_class, &source),
        Command::Search { common, epochs } => commands::search(&common, epochs),
        Command::Finetune {
            common,
            from,
            epochs,
            loss,
        } => commands::finetune(&common, &from, epochs, loss.as_deref()),
        Command::Eval { common, from } => commands::eval(&common, &from),
        Command::Transfer {
            common,
            from,
            to,
            epochs,
        } => commands::transfer(&common, &from, to.as_deref(), epochs),
        Command::Ablate {
            common,
            from,
            runs,
            epochs,
        } => commands::ablate(&common, &from, runs, epochs),
        Command::Report { reports, out } => commands::report(&reports, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
