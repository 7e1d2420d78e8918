//! The subcommand implementations.
//!
//! Each command resolves its dataset and model from the configuration, runs
//! the corresponding pipeline stage, and writes its artifacts under the
//! content-addressed run directory `<out>/<config-digest>/`. Analysis CSVs
//! open with a `#`-comment carrying the digest and master seed; a
//! `manifest.json` in the run directory records the full resolved
//! configuration. All files are written to a temporary sibling and renamed
//! into place, so readers never observe partial artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use datadiet_core::data::{
    corrupt_labels, generate_synthetic, load_cifar_binary, load_idx, load_snapshot,
    save_snapshot, take_subset, Dataset,
};
use datadiet_core::dynamics::{
    alpha_grid, alpha_mid_only, spawn_barriers, velocity_profile, write_barrier_csv,
    write_velocity_csv,
};
use datadiet_core::fsio::write_atomic;
use datadiet_core::nn::ModelSpec;
use datadiet_core::pruning::{
    prune_and_retrain, select, sweep_fraction, sweep_window, write_results_csv, PruneResult,
    SelectionPolicy,
};
use datadiet_core::scores::{
    el2n_single, grand_single, load_score_table, save_score_table, score_over_runs, spearman,
    ScoreKind, ScoreTable,
};
use datadiet_core::seeds;
use datadiet_core::trainer::{load_checkpoint, save_checkpoint, train};
use datadiet_core::Scalar;

use crate::config::{DataSource, ExperimentConfig};
use crate::CliError;

/// The content-addressed directory layout of one experiment.
pub struct RunPaths {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub scores: PathBuf,
    pub results: PathBuf,
    pub data: PathBuf,
}

impl RunPaths {
    pub fn new(root: PathBuf) -> Self {
        RunPaths {
            checkpoints: root.join("checkpoints"),
            scores: root.join("scores"),
            results: root.join("results"),
            data: root.join("data"),
            root,
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// The provenance comment that opens every analysis CSV.
fn stamp(config: &ExperimentConfig, digest: &str) -> String {
    format!("# config_digest={digest} master_seed={}\n", config.seed)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_digest: &'a str,
    master_seed: u64,
    config: &'a ExperimentConfig,
}

/// Record the resolved configuration in the run directory.
pub fn write_manifest(
    paths: &RunPaths,
    config: &ExperimentConfig,
    digest: &str,
) -> Result<(), CliError> {
    ensure_dir(&paths.root)?;
    let manifest = Manifest {
        config_digest: digest,
        master_seed: config.seed,
        config,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&paths.root.join("manifest.json"), &json)
}

/// Load the training split (and test split, when the source has one), then
/// apply the configured label corruption to the training labels.
fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let data = &config.data;
    let (mut train_ds, test_ds) = match data.source {
        DataSource::Synthetic => {
            let (train_ds, test_ds) = generate_synthetic(&data.synthetic)?;
            (train_ds, Some(test_ds))
        }
        DataSource::Idx => {
            let paths = data.idx.as_ref().expect("validated");
            let train_ds = load_idx(&paths.train_images, &paths.train_labels)?;
            let test_ds = match (&paths.test_images, &paths.test_labels) {
                (Some(images), Some(labels)) => Some(load_idx(images, labels)?),
                (None, None) => None,
                _ => {
                    return Err(CliError::Config(
                        "data.idx needs both test_images and test_labels for a test split"
                            .into(),
                    ));
                }
            };
            (train_ds, test_ds)
        }
        DataSource::Cifar => {
            let paths = data.cifar.as_ref().expect("validated");
            let train_ds = load_cifar_binary(&paths.train)?;
            let test_ds = if paths.test.is_empty() {
                None
            } else {
                Some(load_cifar_binary(&paths.test)?)
            };
            (train_ds, test_ds)
        }
        DataSource::Snapshot => {
            let paths = data.snapshot.as_ref().expect("validated");
            let train_ds = load_snapshot(&paths.train)?;
            let test_ds = match &paths.test {
                Some(path) => Some(load_snapshot(path)?),
                None => None,
            };
            (train_ds, test_ds)
        }
    };
    if data.corruption_fraction > 0.0 {
        train_ds = corrupt_labels(
            &train_ds,
            data.corruption_fraction,
            seeds::derive(config.seed, seeds::tag::CORRUPTION, 0),
        )?;
    }
    Ok((train_ds, test_ds))
}

/// The model spec, shape-checked against the data it will consume.
fn model_for(config: &ExperimentConfig, dataset: &Dataset) -> Result<ModelSpec, CliError> {
    let spec = config.model.clone();
    if spec.input_dim != dataset.input_dim() {
        return Err(CliError::Config(format!(
            "model expects {}-dimensional inputs but dataset '{}' has {}",
            spec.input_dim,
            dataset.name(),
            dataset.input_dim()
        )));
    }
    if spec.classes != dataset.classes() {
        return Err(CliError::Config(format!(
            "model predicts {} classes but dataset '{}' has {}",
            spec.classes,
            dataset.name(),
            dataset.classes()
        )));
    }
    Ok(spec)
}

fn require_test(test_ds: Option<Dataset>) -> Result<Dataset, CliError> {
    test_ds.ok_or_else(|| {
        CliError::Config("this command needs a test split, but the data source has none".into())
    })
}

/// The score file `score` writes first, used as the default selection input.
fn default_score_file(config: &ExperimentConfig) -> String {
    let kind = config.score.kinds[0];
    let epoch = match kind {
        ScoreKind::Forget => config.train.epochs,
        _ => config.score.epochs[0],
    };
    format!("{kind}_epoch{epoch}.csv")
}

/// Load the configured score table (`prune.score_csv`, or the default file
/// under `scores/`).
fn load_table(config: &ExperimentConfig, paths: &RunPaths) -> Result<ScoreTable, CliError> {
    let path = match &config.prune.score_csv {
        Some(path) => path.clone(),
        None => paths.scores.join(default_score_file(config)),
    };
    Ok(load_score_table(&path)?)
}

fn parse_policy(name: &str, offset: f64) -> SelectionPolicy {
    match name {
        "keep_top" => SelectionPolicy::KeepTop,
        "random" => SelectionPolicy::Random,
        "window" => SelectionPolicy::Window { offset },
        other => unreachable!("policy '{other}' passed validation"),
    }
}

/// A window must fit inside the ranking: skipping `offset * n` and keeping
/// `fraction * n` cannot overrun the bottom.
fn check_window_fits(offset: f64, fraction: f64) -> Result<(), CliError> {
    if offset + fraction > 1.0 + 1e-12 {
        return Err(CliError::Config(format!(
            "window offset {offset} plus keep fraction {fraction} overruns the ranking"
        )));
    }
    Ok(())
}

pub fn cmd_train<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    let (train_ds, test_ds) = load_datasets(config)?;
    let spec = model_for(config, &train_ds)?;
    let output = train::<T>(&spec, &train_ds, test_ds.as_ref(), &config.train)?;

    ensure_dir(&paths.checkpoints)?;
    ensure_dir(&paths.results)?;
    for checkpoint in &output.trajectory.checkpoints {
        let file = paths
            .checkpoints
            .join(format!("epoch_{:04}.ckpt", checkpoint.epoch));
        save_checkpoint(checkpoint, &file)?;
    }

    let mut metrics = stamp(config, digest);
    metrics.push_str("epoch,train_loss,train_acc,test_acc,lr\n");
    for m in &output.metrics {
        let test_acc = m.test_acc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            metrics,
            "{},{},{},{},{}",
            m.epoch, m.train_loss, m.train_acc, test_acc, m.lr
        )
        .expect("writing to a String cannot fail");
    }
    write_file(&paths.results.join("metrics.csv"), metrics.as_bytes())?;

    let mut presentations = stamp(config, digest).into_bytes();
    output.log.write_csv(&mut presentations).map_err(|e| CliError::Io {
        path: paths.results.join("presentations.csv"),
        message: e.to_string(),
    })?;
    write_file(&paths.results.join("presentations.csv"), &presentations)?;

    let last = output.metrics.last().expect("at least one epoch");
    print!(
        "trained {} epochs on {} examples: train_acc={}",
        output.metrics.len(),
        train_ds.len(),
        last.train_acc
    );
    match last.test_acc {
        Some(acc) => println!(" test_acc={acc}"),
        None => println!(),
    }
    println!(
        "wrote {} checkpoints, {}, {}",
        output.trajectory.checkpoints.len(),
        paths.results.join("metrics.csv").display(),
        paths.results.join("presentations.csv").display()
    );
    Ok(())
}

pub fn cmd_score<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<(), CliError> {
    let (train_ds, _) = load_datasets(config)?;
    let spec = model_for(config, &train_ds)?;
    ensure_dir(&paths.scores)?;

    let mut tables = Vec::new();
    if let Some(checkpoint_path) = &config.score.checkpoint {
        // Score an existing checkpoint directly: one table per kind, no
        // training runs.
        let checkpoint = load_checkpoint(checkpoint_path)?;
        for &kind in &config.score.kinds {
            let table = match kind {
                ScoreKind::Grand => grand_single::<T>(&checkpoint, &train_ds)?,
                ScoreKind::El2n => el2n_single::<T>(&checkpoint, &train_ds)?,
                ScoreKind::Forget => {
                    return Err(CliError::Config(
                        "forgetting counts come from a full training run, \
                         not a checkpoint; drop score.checkpoint"
                            .into(),
                    ));
                }
                ScoreKind::External => unreachable!("rejected by validation"),
            };
            tables.push(table);
        }
    } else {
        if let Some(&epoch) = config
            .score
            .epochs
            .iter()
            .find(|&&e| e > config.train.epochs)
        {
            return Err(CliError::Config(format!(
                "score epoch {epoch} is beyond the {}-epoch schedule",
                config.train.epochs
            )));
        }
        for &kind in &config.score.kinds {
            if kind == ScoreKind::Forget {
                let table = score_over_runs::<T>(
                    &spec,
                    &train_ds,
                    &config.train,
                    kind,
                    0, // forgetting spans the whole run; the epoch is ignored
                    config.score.runs,
                    config.seed,
                )?;
                tables.push(table);
                continue;
            }
            for &epoch in &config.score.epochs {
                tables.push(score_over_runs::<T>(
                    &spec,
                    &train_ds,
                    &config.train,
                    kind,
                    epoch,
                    config.score.runs,
                    config.seed,
                )?);
            }
        }
    }

    for table in &tables {
        let file = paths
            .scores
            .join(format!("{}_epoch{}.csv", table.kind, table.epoch));
        save_score_table(table, &file)?;
        println!(
            "wrote {} (kind={}, epoch={}, n={}, runs={})",
            file.display(),
            table.kind,
            table.epoch,
            table.len(),
            table.seeds.len() / 2
        );
    }
    Ok(())
}

fn report_prune_results(results: &[PruneResult]) {
    for r in results {
        let offset = match r.policy {
            SelectionPolicy::Window { offset } => format!(" offset={offset}"),
            _ => String::new(),
        };
        println!(
            "{} f={}{}: kept={} mean_test_acc={} band=[{}, {}]",
            r.policy.name(),
            r.fraction,
            offset,
            r.kept,
            r.mean_test_accuracy,
            r.band_low,
            r.band_high
        );
    }
}

/// Write the per-retrain CSV and the summary JSON for a batch of results.
fn write_prune_artifacts(
    results: &[PruneResult],
    name: &str,
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    ensure_dir(&paths.results)?;
    let csv_path = paths.results.join(format!("{name}.csv"));
    let mut csv = stamp(config, digest).into_bytes();
    write_results_csv(results, &mut csv).map_err(|e| CliError::Io {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    write_file(&csv_path, &csv)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config_digest: &'a str,
        master_seed: u64,
        results: &'a [PruneResult],
    }
    let json = serde_json::to_vec_pretty(&Summary {
        config_digest: digest,
        master_seed: config.seed,
        results,
    })
    .expect("results serialize");
    write_file(&paths.results.join(format!("{name}_summary.json")), &json)?;

    println!("wrote {}", csv_path.display());
    report_prune_results(results);
    Ok(())
}

pub fn cmd_prune<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    let (train_ds, test_ds) = load_datasets(config)?;
    let test_ds = require_test(test_ds)?;
    let spec = model_for(config, &train_ds)?;
    if config.prune.policies.iter().any(|p| p == "window") {
        check_window_fits(config.prune.offset, config.prune.fraction)?;
    }
    let table = load_table(config, paths)?;

    let mut results = Vec::new();
    for name in &config.prune.policies {
        let policy = parse_policy(name, config.prune.offset);
        results.push(prune_and_retrain::<T>(
            &spec,
            &train_ds,
            &test_ds,
            &config.train,
            &table,
            policy,
            config.prune.fraction,
            config.prune.retrains,
            config.seed,
        )?);
    }
    write_prune_artifacts(&results, "prune", config, paths, digest)
}

pub fn cmd_sweep<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    let (train_ds, test_ds) = load_datasets(config)?;
    let test_ds = require_test(test_ds)?;
    let spec = model_for(config, &train_ds)?;
    if config.prune.policies.iter().any(|p| p == "window") {
        for &fraction in &config.prune.fractions {
            check_window_fits(config.prune.offset, fraction)?;
        }
    }
    let table = load_table(config, paths)?;

    let mut results = Vec::new();
    for name in &config.prune.policies {
        let policy = parse_policy(name, config.prune.offset);
        results.extend(sweep_fraction::<T>(
            &spec,
            &train_ds,
            &test_ds,
            &config.train,
            &table,
            policy,
            &config.prune.fractions,
            config.prune.retrains,
            config.seed,
        )?);
    }
    write_prune_artifacts(&results, "sweep", config, paths, digest)
}

pub fn cmd_window_sweep<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    let (train_ds, test_ds) = load_datasets(config)?;
    let test_ds = require_test(test_ds)?;
    let spec = model_for(config, &train_ds)?;
    for &offset in &config.prune.offsets {
        check_window_fits(offset, config.prune.fraction)?;
    }
    let table = load_table(config, paths)?;

    let results = sweep_window::<T>(
        &spec,
        &train_ds,
        &test_ds,
        &config.train,
        &table,
        config.prune.fraction,
        &config.prune.offsets,
        config.prune.retrains,
        config.seed,
    )?;
    write_prune_artifacts(&results, "window_sweep", config, paths, digest)
}

pub fn cmd_velocity<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    let (train_ds, _) = load_datasets(config)?;
    let spec = model_for(config, &train_ds)?;
    let table = load_table(config, paths)?;

    // Rerun the training trajectory with checkpoints pinned at the
    // requested epochs; the weights are bit-identical to `train`'s since
    // checkpoint placement never alters the update sequence.
    let mut train_config = config.train.clone();
    train_config.score_epochs = config.dynamics.velocity_epochs.clone();
    let output = train::<T>(&spec, &train_ds, None, &train_config)?;

    let points = velocity_profile::<T>(
        &output.trajectory.checkpoints,
        &train_ds,
        &table,
        config.dynamics.bucket_size,
        config.dynamics.bucket_stride,
    )?;

    ensure_dir(&paths.results)?;
    let csv_path = paths.results.join("velocity.csv");
    let mut csv = stamp(config, digest).into_bytes();
    write_velocity_csv(&points, &mut csv).map_err(|e| CliError::Io {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    write_file(&csv_path, &csv)?;
    println!(
        "wrote {} ({} bucket velocities over {} checkpoint pairs)",
        csv_path.display(),
        points.len(),
        {
            let mut epochs: Vec<usize> = points.iter().map(|p| p.epoch).collect();
            epochs.dedup();
            epochs.len()
        }
    );
    Ok(())
}

fn alphas_for(config: &ExperimentConfig) -> Vec<f64> {
    if config.dynamics.alpha_mid_only {
        alpha_mid_only()
    } else {
        alpha_grid(config.dynamics.alpha_points)
    }
}

pub fn cmd_barrier<T: Scalar>(
    config: &ExperimentConfig,
    paths: &RunPaths,
    digest: &str,
) -> Result<(), CliError> {
    let (train_ds, _) = load_datasets(config)?;
    let spec = model_for(config, &train_ds)?;
    let alphas = alphas_for(config);
    let dynamics = &config.dynamics;

    let mut points = spawn_barriers::<T>(
        &spec,
        &train_ds,
        &config.train,
        &dynamics.spawn_epochs,
        dynamics.n_pairs,
        &alphas,
        config.seed,
        "full",
    )?;

    if !dynamics.barrier_fractions.is_empty() {
        let table = load_table(config, paths)?;
        table.validate_against(&train_ds)?;
        for &fraction in &dynamics.barrier_fractions {
            let ends = [
                ("top", SelectionPolicy::KeepTop),
                // Skipping the complementary share from the top leaves
                // exactly the bottom of the ranking.
                ("bottom", SelectionPolicy::Window { offset: 1.0 - fraction }),
            ];
            for (end, policy) in ends {
                let kept = select(&table, policy, fraction, config.seed)?;
                let subset = take_subset(&train_ds, &kept)?;
                // Subsets keep the full-data step budget and decay
                // boundaries, exactly like pruned retraining.
                let mut train_config = config.train.clone();
                train_config.schedule_n = Some(train_ds.len());
                points.extend(spawn_barriers::<T>(
                    &spec,
                    &subset,
                    &train_config,
                    &dynamics.spawn_epochs,
                    dynamics.n_pairs,
                    &alphas,
                    config.seed,
                    &format!("{end}_{fraction}"),
                )?);
            }
        }
    }

    ensure_dir(&paths.results)?;
    let csv_path = paths.results.join("barrier.csv");
    let mut csv = stamp(config, digest).into_bytes();
    write_barrier_csv(&points, &mut csv).map_err(|e| CliError::Io {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    write_file(&csv_path, &csv)?;
    println!("wrote {} ({} barrier points)", csv_path.display(), points.len());
    Ok(())
}

pub fn cmd_correlate(a_path: &Path, b_path: &Path) -> Result<(), CliError> {
    let a = load_score_table(a_path)?;
    let b = load_score_table(b_path)?;
    let rho = spearman(&a, &b)?;
    println!(
        "a: {} (kind={}, epoch={}, n={})",
        a_path.display(),
        a.kind,
        a.epoch,
        a.len()
    );
    println!(
        "b: {} (kind={}, epoch={}, n={})",
        b_path.display(),
        b.kind,
        b.epoch,
        b.len()
    );
    println!("spearman_rho={rho}");
    Ok(())
}

/// Materialize the configured dataset (corruption included) as snapshots.
pub fn cmd_gen_data(config: &ExperimentConfig, paths: &RunPaths) -> Result<(), CliError> {
    let (train_ds, test_ds) = load_datasets(config)?;
    ensure_dir(&paths.data)?;
    let train_path = paths.data.join("train.ddset");
    save_snapshot(&train_ds, &train_path)?;
    println!(
        "wrote {} (n={}, digest={}, corrupted={})",
        train_path.display(),
        train_ds.len(),
        train_ds.digest(),
        train_ds.corrupted_count()
    );
    if let Some(test_ds) = test_ds {
        let test_path = paths.data.join("test.ddset");
        save_snapshot(&test_ds, &test_path)?;
        println!(
            "wrote {} (n={}, digest={})",
            test_path.display(),
            test_ds.len(),
            test_ds.digest()
        );
    }
    Ok(())
}
