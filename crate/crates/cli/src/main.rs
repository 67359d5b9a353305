//! `dmsae`: generate data, train, select cores, distill, transfer, evaluate,
//! and sweep. Data goes to files under `--out`; diagnostics go to stderr.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmsae_core::sae::Regime;

use crate::config::SweepGrid;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(dmsae_core::Error),
}

impl From<dmsae_core::Error> for CliError {
    fn from(e: dmsae_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dmsae",
    version,
    about = "Distilled Matryoshka sparse autoencoders"
)]
struct Cli {
    /// More log output (repeatable); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; every file the command writes lands here.
    #[arg(long)]
    pub out: PathBuf,
    /// Base seed (overrides DMSAE_SEED and the config file).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Shard basename (`<data>.act`, `.grd`, `.tok`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fraction of rows held out for attribution and evaluation [default: 0.1].
    #[arg(long)]
    pub held_out_fraction: Option<f64>,
    /// Subtract the training mean from activations.
    #[arg(long)]
    pub center: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Dictionary width K [default: 512].
    #[arg(long)]
    pub width: Option<usize>,
    /// Sparsity target k [default: 16].
    #[arg(long)]
    pub k: Option<usize>,
    /// Non-core prefix boundaries, comma separated; the first is m_0
    /// [default: 32,64,128,256].
    #[arg(long, value_delimiter = ',')]
    pub prefixes: Option<Vec<usize>>,
    /// Rows per training batch [default: 256].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SelectionArgs {
    /// Attribution quantile q [default: 0.99].
    #[arg(long)]
    pub q: Option<f64>,
    /// Attribution coverage τ [default: 0.9].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Token positions scored [default: all held-out rows].
    #[arg(long)]
    pub num_tokens: Option<usize>,
    /// Score on the training split instead of the held-out split.
    #[arg(long)]
    pub score_on_train: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and write its shards.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Ambient dimension d [default: 64].
        #[arg(long)]
        dim: Option<usize>,
        /// Planted dictionary size F [default: 96].
        #[arg(long)]
        features: Option<usize>,
        /// Planted features per token s [default: 4].
        #[arg(long)]
        features_per_token: Option<usize>,
        /// Gaussian noise scale σ [default: 0.05].
        #[arg(long)]
        noise: Option<f64>,
        /// Vocabulary size of the toy head [default: 24].
        #[arg(long)]
        vocab: Option<usize>,
        /// Number of tokens [default: 50000].
        #[arg(long)]
        tokens: Option<usize>,
        /// Firing-rate power-law exponent [default: 0.8].
        #[arg(long)]
        rate_decay: Option<f64>,
    },
    /// Train one model (optionally seeded with a frozen core) with a dense
    /// core and the raw target k.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// `distilled_core.json` providing frozen core rows.
        #[arg(long)]
        core: Option<PathBuf>,
        /// Training tokens [default: 256000].
        #[arg(long)]
        tokens: Option<u64>,
    },
    /// Score a checkpoint's candidate pool and select a core.
    SelectCore {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Checkpoint to score.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Cycle label for the selection [default: 0].
        #[arg(long)]
        cycle: Option<usize>,
    },
    /// Run cycle 0 plus T train-and-select cycles and extract the distilled core.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Train-and-select cycles T [default: 3].
        #[arg(long)]
        cycles: Option<usize>,
        /// Tokens per cycle [default: 256000].
        #[arg(long)]
        tokens_per_cycle: Option<u64>,
        /// Tokens for the core-free cycle-0 model [default: tokens per cycle].
        #[arg(long)]
        cycle0_tokens: Option<u64>,
        /// Shrink the non-core target as the core grows.
        #[arg(long)]
        scale_noncore: bool,
        /// Core-free checkpoint for the cycle-0 selection.
        #[arg(long)]
        initial: Option<PathBuf>,
    },
    /// Train a fresh model from a fixed core at any k and regime.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// `distilled_core.json` providing the frozen core.
        #[arg(long)]
        core: Option<PathBuf>,
        /// Use this many fresh random core rows instead.
        #[arg(long, conflicts_with = "core")]
        random_core: Option<usize>,
        /// dense-core or sparse-core [default: dense-core].
        #[arg(long)]
        regime: Option<Regime>,
        /// Training tokens [default: 256000].
        #[arg(long)]
        tokens: Option<u64>,
    },
    /// Held-out metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Grids over k, regime, or coverage.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// transfer, carryover, or tau [default: transfer].
        #[arg(long, value_enum)]
        grid: Option<SweepGrid>,
        /// Sparsity targets, comma separated.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Coverage values, comma separated.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Regimes for the transfer grid, comma separated.
        #[arg(long, value_delimiter = ',')]
        regimes: Option<Vec<Regime>>,
        /// Shared core for the transfer grid.
        #[arg(long)]
        core: Option<PathBuf>,
        /// Distillation run whose scores the tau grid shares.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Cycle whose scores the tau grid shares [default: 1].
        #[arg(long)]
        cycle: Option<usize>,
        /// Training tokens per model (per cycle for carryover).
        #[arg(long)]
        tokens: Option<u64>,
        /// Parallel jobs [default: 1].
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            common,
            dim,
            features,
            features_per_token,
            noise,
            vocab,
            tokens,
            rate_decay,
        } => commands::gen(
            &common,
            commands::WorldFlags {
                dim,
                features,
                features_per_token,
                noise,
                vocab,
                tokens,
                rate_decay,
            },
        ),
        Command::Train {
            common,
            data,
            model,
            core,
            tokens,
        } => commands::train(&common, &data, &model, core, tokens),
        Command::SelectCore {
            common,
            data,
            selection,
            checkpoint,
            cycle,
        } => commands::select_core(&common, &data, &selection, checkpoint, cycle),
        Command::Distill {
            common,
            data,
            model,
            selection,
            cycles,
            tokens_per_cycle,
            cycle0_tokens,
            scale_noncore,
            initial,
        } => commands::distill(
            &common,
            &data,
            &model,
            &selection,
            commands::DistillFlags {
                cycles,
                tokens_per_cycle,
                cycle0_tokens,
                scale_noncore,
                initial,
            },
        ),
        Command::Transfer {
            common,
            data,
            model,
            core,
            random_core,
            regime,
            tokens,
        } => commands::transfer(&common, &data, &model, core, random_core, regime, tokens),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => commands::eval(&common, &data, checkpoint),
        Command::Sweep {
            common,
            data,
            model,
            grid,
            ks,
            taus,
            regimes,
            core,
            run,
            cycle,
            tokens,
            jobs,
        } => commands::sweep(
            &common,
            &data,
            &model,
            commands::SweepFlags {
                grid,
                ks,
                taus,
                regimes,
                core,
                run,
                cycle,
                tokens,
                jobs,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run `dmsae --help` for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
