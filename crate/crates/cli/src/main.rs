//! `mapcast` command-line tool: ingest, inspect, synthesize, mask, train,
//! predict, run baselines and evaluate traffic map movies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mapcast::trainer::TrainError;

#[derive(Parser)]
#[command(name = "mapcast", version, about = "Traffic map movie forecasting toolkit")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw (t, c, h, w) uint8 buffer into a movie file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        city: String,
        #[arg(long)]
        date: String,
        /// Declared shape as t,c,h,w.
        #[arg(long, value_parser = parse_shape)]
        shape: [usize; 4],
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a movie header as JSON.
    Inspect {
        file: PathBuf,
        /// Also write the raw frame payload to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Write deterministic synthetic movies.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_shape)]
        shape: [usize; 4],
        #[arg(long, default_value = "Synth")]
        city: String,
        /// First date (YYYY-MM-DD); further days follow consecutively.
        #[arg(long, default_value = "2019-01-01")]
        date: String,
        /// Number of days. One day with an `.tmm` path writes that file,
        /// otherwise `out` is a directory of `{city}.{date}.tmm` files.
        #[arg(long, default_value_t = 1)]
        days: usize,
        /// Uniform noise amplitude for slot-pattern volume and speed.
        #[arg(long, default_value_t = 0)]
        noise: u8,
        /// Fill value for the constant kind.
        #[arg(long, default_value_t = 0)]
        value: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an activity mask from all movies of one city.
    Mask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: u8,
        #[arg(long)]
        city: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a U-Net on the movies of one city.
    Train {
        /// JSON with optional `model`, `sgd` and `data` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the epoch log goes next to it as `.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict the clips of the listed slots with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Text file of prediction slots (first predicted frame per clip).
        #[arg(long)]
        slots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        city: Option<String>,
        /// Zero inactive pixels of every prediction.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run a reference baseline on the clips of the listed slots.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        slots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training days for the slot average.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        city: Option<String>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Score prediction files against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Directory with same-named 3-frame files or full day movies.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SynthArg {
    Constant,
    TimeRamp,
    SlotPattern,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BaselineKind {
    SlotAvg,
    Persistence,
    Zero,
}

fn parse_shape(text: &str) -> Result<[usize; 4], String> {
    let dims: Vec<usize> = text
        .split([',', 'x'])
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected 4 dimensions, got {}", d.len()))
}

/// 3 for numerical failures during training, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<TrainError>(),
            Some(TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. })
        )
    });
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
