mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use confmpnn::config::keys_help;
use confmpnn::Error;

/// Conformer-ensemble message-passing networks for virtual screening.
#[derive(Debug, Parser)]
#[command(name = "confmpnn", version)]
struct Cli {
    /// Log progress (per-epoch lines) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that resolves a run configuration.
/// Precedence, lowest first: built-in defaults, `--config` (or the
/// `config.toml` saved next to a checkpoint), `--set`, dedicated flags.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.hidden=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset (JSON Lines).
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Random seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture (`model.arch`).
    #[arg(long)]
    pub arch: Option<String>,
    /// Conformer pooling (`pool.kind`).
    #[arg(long)]
    pub pool: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a raw dataset and write its canonical form plus a rejection report.
    Ingest {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        max_atoms: Option<usize>,
        #[arg(long)]
        max_confs: Option<usize>,
        /// Longest allowed bond in any kept conformer (Å).
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Assign species to train/validation/test by scaffold.
    Split {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model; writes checkpoints, log.csv, and test metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Use this split assignment instead of computing one.
        #[arg(long, value_name = "FILE")]
        split_file: Option<PathBuf>,
    },
    /// Score checkpoints on one split; several checkpoints add a spread.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, required = true, value_name = "FILE")]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "FILE")]
        split_file: Option<PathBuf>,
    },
    /// Hit probabilities as JSON Lines `{"id", "p_hit"}`.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Restrict to one split; every species by default.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, value_name = "FILE")]
        split_file: Option<PathBuf>,
    },
    /// Dump the readout input of every species to fingerprints.json.
    ExportFp {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
    /// Train a readout on exported fingerprints, optionally alongside a fresh 2D network.
    TrainTl {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        dump: PathBuf,
        /// Also learn a 2D message-passing fingerprint.
        #[arg(long)]
        with_mp: bool,
        #[arg(long, value_name = "FILE")]
        split_file: Option<PathBuf>,
    },
    /// Attention coefficients per species and the conformer-similarity comparison.
    AttentionReport {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "FILE")]
        split_file: Option<PathBuf>,
        /// Pairs drawn per comparison.
        #[arg(long, default_value_t = 5000)]
        pairs: usize,
    },
    /// Random hyperparameter search over hidden size, depth, dropout, and readout depth.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Hidden dimension range LO:HI.
        #[arg(long, default_value = "300:2400")]
        hidden: String,
        /// Convolution count range LO:HI.
        #[arg(long, default_value = "2:6")]
        convolutions: String,
        /// Dropout range LO:HI, applied to convolutions and readout.
        #[arg(long, default_value = "0:0.4")]
        dropout: String,
        /// Readout hidden layer range LO:HI.
        #[arg(long, default_value = "1:3")]
        readout: String,
        /// Only write the sampled configurations.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write a generated dataset.
    Synth {
        /// separable | planted | random
        #[arg(long, default_value = "separable")]
        kind: String,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        confs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

/// Process exit status for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::EmptyDataset | Error::SingleClass(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> confmpnn::Result<()> {
    use commands::*;
    match cli.command {
        Command::Ingest {
            run,
            max_atoms,
            max_confs,
            cutoff,
        } => ingest(&run, max_atoms, max_confs, cutoff),
        Command::Split { run } => split(&run),
        Command::Train { run, split_file } => train(&run, split_file.as_deref()),
        Command::Eval {
            run,
            checkpoint,
            split,
            split_file,
        } => eval(&run, &checkpoint, &split, split_file.as_deref()),
        Command::Predict {
            run,
            checkpoint,
            split,
            split_file,
        } => predict(&run, &checkpoint, split.as_deref(), split_file.as_deref()),
        Command::ExportFp { run, checkpoint } => export_fp(&run, &checkpoint),
        Command::TrainTl {
            run,
            dump,
            with_mp,
            split_file,
        } => train_tl(&run, &dump, with_mp, split_file.as_deref()),
        Command::AttentionReport {
            run,
            checkpoint,
            split,
            split_file,
            pairs,
        } => attention_report(&run, &checkpoint, &split, split_file.as_deref(), pairs),
        Command::Sweep {
            run,
            samples,
            hidden,
            convolutions,
            dropout,
            readout,
            dry_run,
        } => {
            let ranges = SweepRanges::parse(&hidden, &convolutions, &dropout, &readout)?;
            sweep(&run, samples, &ranges, dry_run)
        }
        Command::Synth {
            kind,
            n,
            confs,
            seed,
            out,
        } => synth(&kind, n, confs, seed, &out),
    }
}

fn main() -> ExitCode {
    let keys = keys_help();
    let cmd = Cli::command()
        .after_long_help(keys.clone())
        .mut_subcommands(|s| s.after_long_help(keys.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
