//! `datadiet` — seeded experiments for per-example importance scoring,
//! score-based dataset pruning, and training-dynamics probes.
//!
//! Every run is a pure function of its JSON configuration: artifacts land
//! under `<out>/<config-digest>/` and rerunning an identical configuration
//! reproduces them byte for byte.
//!
//! Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 bad
//! configuration or input, 3 missing or corrupt artifact, 4 data-contract
//! violation (id sets that do not line up).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use datadiet_core::data::DataError;
use datadiet_core::dynamics::DynError;
use datadiet_core::nn::NnError;
use datadiet_core::pruning::PruneError;
use datadiet_core::scores::ScoreError;
use datadiet_core::trainer::TrainError;
use datadiet_core::Scalar;

use config::{ConfigSource, ExperimentConfig, Precision};

#[derive(Parser)]
#[command(
    name = "datadiet",
    version,
    about = "Per-example importance scores, dataset pruning, and training-dynamics probes",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration (built-in defaults when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path configuration override, e.g. --set train.epochs=8
    /// (repeatable; values parse as JSON, falling back to strings).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads (default: one per CPU). Results are identical at any
    /// thread count.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Master seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output root (default: config `out`, then $DATADIET_OUT, then ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run all numerics in 64-bit precision.
    #[arg(long = "f64", global = true)]
    force_f64: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train once; write checkpoints, epoch metrics, and presentation logs.
    Train,
    /// Compute score tables (GraNd / EL2N / forgetting) averaged over runs.
    Score,
    /// Retrain on score-selected subsets at one kept fraction.
    Prune,
    /// Retrain across the configured kept-fraction grid.
    Sweep,
    /// Retrain across the configured window-offset grid at a fixed fraction.
    WindowSweep,
    /// Kernel-velocity profile over score-ranked example buckets.
    Velocity,
    /// Error barriers between children spawned along the trajectory.
    Barrier,
    /// Spearman rank correlation between two score CSVs.
    Correlate {
        /// First score CSV.
        a: PathBuf,
        /// Second score CSV.
        b: PathBuf,
    },
    /// Materialize the configured dataset as `.ddset` snapshots.
    GenData,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Dynamics(#[from] DynError),
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(e) => data_code(e),
            CliError::Train(e) => train_code(e),
            CliError::Score(e) => score_code(e),
            CliError::Prune(e) => prune_code(e),
            CliError::Dynamics(e) => dynamics_code(e),
            CliError::Io { .. } => 3,
        }
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::UnknownId(_) => 4,
        _ => 2,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::CheckpointIo { .. } | TrainError::CheckpointMismatch(_) => 3,
        TrainError::Diverged { .. } => 1,
        _ => 2,
    }
}

fn nn_code(_: &NnError) -> u8 {
    2
}

fn score_code(e: &ScoreError) -> u8 {
    match e {
        ScoreError::Io { .. } | ScoreError::Format { .. } => 3,
        ScoreError::IdMismatch { .. } => 4,
        ScoreError::Train(inner) => train_code(inner),
        ScoreError::Nn(inner) => nn_code(inner),
        _ => 2,
    }
}

fn prune_code(e: &PruneError) -> u8 {
    match e {
        PruneError::Score(inner) => score_code(inner),
        PruneError::Data(inner) => data_code(inner),
        PruneError::Train(inner) => train_code(inner),
        PruneError::Nn(inner) => nn_code(inner),
        PruneError::Io { .. } => 3,
        PruneError::Config(_) => 2,
    }
}

fn dynamics_code(e: &DynError) -> u8 {
    match e {
        DynError::Score(inner) => score_code(inner),
        DynError::Train(inner) => train_code(inner),
        DynError::Data(inner) => data_code(inner),
        DynError::Nn(inner) => nn_code(inner),
        DynError::Config(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore failure: the global pool can only be set once, and a
        // repeat configuration attempt does not invalidate results.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    // Correlation reads two explicit files; it needs no configuration or
    // run directory.
    if let Command::Correlate { a, b } = &cli.command {
        return commands::cmd_correlate(a, b);
    }

    let config = config::resolve(&ConfigSource {
        path: cli.config,
        sets: cli.set,
        seed: cli.seed,
        force_f64: cli.force_f64,
    })?;
    let digest = config::digest(&config);
    let out_root = cli
        .out
        .or_else(|| config.out.clone())
        .or_else(|| std::env::var_os("DATADIET_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let paths = commands::RunPaths::new(out_root.join(&digest));
    commands::write_manifest(&paths, &config, &digest)?;

    match config.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &config, &paths, &digest),
        Precision::F64 => dispatch::<f64>(&cli.command, &config, &paths, &digest),
    }
}

fn dispatch<T: Scalar>(
    command: &Command,
    config: &ExperimentConfig,
    paths: &commands::RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    match command {
        Command::Train => commands::cmd_train::<T>(config, paths, digest),
        Command::Score => commands::cmd_score::<T>(config, paths),
        Command::Prune => commands::cmd_prune::<T>(config, paths, digest),
        Command::Sweep => commands::cmd_sweep::<T>(config, paths, digest),
        Command::WindowSweep => commands::cmd_window_sweep::<T>(config, paths, digest),
        Command::Velocity => commands::cmd_velocity::<T>(config, paths, digest),
        Command::Barrier => commands::cmd_barrier::<T>(config, paths, digest),
        Command::GenData => commands::cmd_gen_data(config, paths),
        Command::Correlate { .. } => unreachable!("handled before dispatch"),
    }
}
