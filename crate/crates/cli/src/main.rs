mod commands;
mod config;
mod heatmap;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{PruneMethod, StrategyName};

/// Train, prune and analyze small ReLU networks on MNIST-format data.
#[derive(Parser, Debug)]
#[command(name = "sparsescape", version)]
struct Cli {
    /// Worker threads for grid, trace and Hessian evaluation (1 gives fully sequential execution).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory with the IDX files; overrides SPARSESCAPE_DATA and `data.root`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense network from a seeded initialization.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce a mask by one-shot magnitude pruning or gradual pruning.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<PruneMethod>,
        /// Trained checkpoint (one-shot).
        #[arg(long)]
        trained: Option<PathBuf>,
        /// Starting checkpoint for gradual pruning; a fresh seeded init when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Exact number of weights to remove (one-shot).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Retrain a pruned network from rewound, re-initialized or trained values.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: PathBuf,
        /// Checkpoint holding the initial parameters.
        #[arg(long)]
        init: PathBuf,
        /// Checkpoint holding trained parameters (fine-tuning).
        #[arg(long)]
        trained: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyName>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate fields over the plane through two checkpoints.
    Plane {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Leading Hessian eigenvalues of a checkpoint.
    Hessian {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PSP norms and first/second-order PSP-entropy of a checkpoint.
    Psp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1, 2, or both when omitted.
        #[arg(long)]
        order: Option<u8>,
    },
    /// Compare a gradually pruned and a one-shot checkpoint on every metric.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gradual: PathBuf,
        #[arg(long)]
        oneshot: PathBuf,
    },
    /// Collect run manifests into one summary table.
    Report {
        #[arg(long, short)]
        out: PathBuf,
        /// Run directories holding a manifest.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<sparsescape::Error>())
        .any(|e| e.is_numeric());
    if numeric {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let ctx = commands::Context { threads: threads.max(1), data: cli.data.clone() };
    let result = match cli.command {
        Command::Train { common, epochs, seed } => commands::train(&ctx, &common, epochs, seed),
        Command::Prune { common, method, trained, init, fraction, count } => {
            commands::prune(&ctx, &common, method, trained.as_deref(), init.as_deref(), fraction, count)
        }
        Command::Retrain { common, mask, init, trained, strategy, seed } => {
            commands::retrain(&ctx, &common, &mask, &init, trained.as_deref(), strategy, seed)
        }
        Command::Plane { common, a, b } => commands::plane(&ctx, &common, &a, &b),
        Command::Hessian { common, checkpoint } => commands::hessian(&ctx, &common, &checkpoint),
        Command::Psp { common, checkpoint, order } => commands::psp(&ctx, &common, &checkpoint, order),
        Command::Analyze { common, gradual, oneshot } => commands::analyze(&ctx, &common, &gradual, &oneshot),
        Command::Report { out, runs } => commands::report(&out, &runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
