//! `partigen`: prepare data, train, generate, evaluate and inspect part masks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partigen::data::Split;

mod commands;
mod config;

/// Environment variable overriding the default cache root.
pub const CACHE_ENV: &str = "PARTIGEN_CACHE_DIR";
const DEFAULT_CACHE: &str = "partigen-cache";

/// Bad input from the user: flags, config, dataset layout, ids.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

#[derive(Parser)]
#[command(
    name = "partigen",
    version,
    about = "Pose-guided person image generation with part-wise feature warping"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config file; overrides the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    Config,
    /// Write the bundled stick-figure dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a dataset, drop undetectable pairs and cache heat maps and part masks.
    Prepare {
        #[arg(long)]
        dataset: PathBuf,
        /// Cache directory [default: $PARTIGEN_CACHE_DIR or ./partigen-cache]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Record that no identity appears in both splits.
        #[arg(long)]
        identity_disjoint: bool,
    },
    /// Train (or resume) in a run directory.
    Train {
        /// Prepared cache [default: $PARTIGEN_CACHE_DIR or ./partigen-cache]
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the source person in the target pose and background.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        /// Output PNG; a provenance record is written next to it with a .json extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// IS, mask-IS and FID of a directory of generated images.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// Person masks named like the generated images; enables mask-IS.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        splits: Option<usize>,
        /// JSON-lines report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump region masks, refined masks, heat maps and the fg/bg split of one sample.
    PartitionDebug {
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn cache_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut sets = cli.global.sets;
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{key}={v}"));
        }
    };
    match &cli.command {
        Command::Train {
            epochs,
            iterations,
            seed,
            ..
        } => {
            flag("train.epochs", epochs.map(|v| v.to_string()));
            flag("train.iterations_per_epoch", iterations.map(|v| v.to_string()));
            flag("train.seed", seed.map(|v| v.to_string()));
        }
        Command::Evaluate { backend, splits, .. } => {
            flag("eval.backend", backend.as_ref().map(|b| format!("{b:?}")));
            flag("eval.splits", splits.map(|v| v.to_string()));
        }
        _ => {}
    }
    let cfg = config::resolve(cli.global.config.as_deref(), &sets)?;

    match cli.command {
        Command::Config => {
            print!("{}", cfg.text);
            Ok(())
        }
        Command::Synth { out, pairs, seed } => commands::synth(&cfg, &out, pairs, seed),
        Command::Prepare {
            dataset,
            out,
            split,
            identity_disjoint,
        } => commands::prepare(
            &cfg,
            commands::PrepareArgs {
                dataset: &dataset,
                out: &cache_root(out),
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
                identity_disjoint,
            },
        ),
        Command::Train { prepared, out, .. } => commands::train(&cfg, &cache_root(prepared), &out),
        Command::Generate {
            checkpoint,
            prepared,
            src,
            tgt,
            out,
        } => commands::generate(&cfg, &checkpoint, &cache_root(prepared), &src, &tgt, &out),
        Command::Evaluate {
            generated,
            real,
            masks,
            out,
            ..
        } => commands::evaluate_dirs(&cfg, &generated, &real, masks.as_deref(), &out),
        Command::PartitionDebug { prepared, sample, out } => {
            commands::partition_debug(&cfg, &cache_root(prepared), &sample, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(
            partigen::Error::Validation(_) | partigen::Error::InvalidArgument(_) | partigen::Error::MissingTorso(_),
        ) = cause.downcast_ref::<partigen::Error>()
        {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
