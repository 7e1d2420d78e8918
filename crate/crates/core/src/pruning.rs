//! Score-based dataset pruning with retraining.
//!
//! Selection works on a score table: examples are ordered ascending by
//! `(score, id)` — the id tiebreak makes every policy deterministic — and a
//! policy picks which `round(fraction * N)` ids to keep. Retraining then
//! runs fresh seeded models on the kept subset while preserving the full
//! dataset's optimizer step budget and LR decay boundaries, so accuracy
//! differences come from the data, not from a shorter schedule.
//!
//! Retrain seeds derive from a dedicated tag, disjoint from scoring-run
//! seeds by construction.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{take_subset, DataError, Dataset};
use crate::nn::ModelSpec;
use crate::scalar::Scalar;
use crate::scores::{ScoreError, ScoreKind, ScoreTable};
use crate::seeds;
use crate::trainer::{evaluate, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid pruning request: {0}")]
    Config(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error("results io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// How to choose the kept subset from a score ordering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Keep the `round(f*N)` highest-scored examples.
    KeepTop,
    /// Skip the `round(offset*N)` highest-scored examples, then keep the
    /// next `round(f*N)` going down the ordering. The skip is clamped so the
    /// window always holds exactly `round(f*N)` examples; `offset = 0` is
    /// `KeepTop`.
    Window { offset: f64 },
    /// Keep a uniform sample of `round(f*N)` ids (scores ignored).
    Random,
}

impl SelectionPolicy {
    /// Policy name as written in results CSVs.
    pub fn name(&self) -> &'static str {
        match self {
            SelectionPolicy::KeepTop => "keep_top",
            SelectionPolicy::Window { .. } => "window",
            SelectionPolicy::Random => "random",
        }
    }

    pub fn offset(&self) -> f64 {
        match self {
            SelectionPolicy::Window { offset } => *offset,
            _ => 0.0,
        }
    }
}

/// Number of examples a fraction keeps (round-half-away-from-zero).
pub fn kept_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Choose the kept ids. `selection_seed` matters only for `Random`.
///
/// Returns the kept ids in ascending order; errors if the selection would
/// be empty.
pub fn select(
    table: &ScoreTable,
    policy: SelectionPolicy,
    fraction: f64,
    selection_seed: u64,
) -> Result<Vec<u64>, PruneError> {
    if !(fraction.is_finite() && 0.0 < fraction && fraction <= 1.0) {
        return Err(PruneError::Config(format!(
            "keep fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = table.len();
    let k = kept_count(n, fraction);
    if k == 0 {
        return Err(PruneError::Config(format!(
            "keeping {fraction} of {n} examples selects nothing"
        )));
    }
    let mut kept: Vec<u64> = match policy {
        SelectionPolicy::KeepTop | SelectionPolicy::Window { .. } => {
            if let SelectionPolicy::Window { offset } = policy {
                if !(offset.is_finite() && (0.0..1.0).contains(&offset)) {
                    return Err(PruneError::Config(format!(
                        "window offset must be in [0, 1), got {offset}"
                    )));
                }
            }
            let mut order: Vec<(f64, u64)> =
                table.entries().iter().map(|&(id, s)| (s, id)).collect();
            order.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
            let skip = kept_count(n, policy.offset()).min(n - k);
            // Ascending order: the window sits `skip` below the top.
            order[n - skip - k..n - skip]
                .iter()
                .map(|&(_, id)| id)
                .collect()
        }
        SelectionPolicy::Random => {
            let mut rng = seeds::rng(seeds::derive(selection_seed, seeds::tag::SELECTION, 0));
            let mut ids: Vec<u64> = table.entries().iter().map(|e| e.0).collect();
            ids.shuffle(&mut rng);
            ids.truncate(k);
            ids
        }
    };
    kept.sort_unstable();
    Ok(kept)
}

/// One retrained model on the kept subset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrainOutcome {
    /// Derived init seed of this retrain (its data-order seed is the next
    /// derivation index).
    pub seed: u64,
    pub test_accuracy: f64,
    pub final_train_loss: f64,
}

/// A pruning experiment at one (policy, fraction) point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneResult {
    pub score_kind: ScoreKind,
    pub score_epoch: usize,
    pub policy: SelectionPolicy,
    pub fraction: f64,
    pub kept: usize,
    pub outcomes: Vec<RetrainOutcome>,
    pub mean_test_accuracy: f64,
    /// 16th percentile of test accuracy over retrains (linear interpolation
    /// between order statistics).
    pub band_low: f64,
    /// 84th percentile of test accuracy over retrains.
    pub band_high: f64,
}

/// Percentile by linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Prune by score, then retrain `n_retrains` fresh models on the subset.
///
/// Each retrain r uses `init = derive(base_seed, RETRAIN, 2r)` and
/// `order = derive(base_seed, RETRAIN, 2r+1)`, and keeps the full dataset's
/// step budget (`schedule_n = N`), so LR decays fall on the same step
/// indices at every pruning level.
pub fn prune_and_retrain<T: Scalar>(
    spec: &ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
    table: &ScoreTable,
    policy: SelectionPolicy,
    fraction: f64,
    n_retrains: usize,
    base_seed: u64,
) -> Result<PruneResult, PruneError> {
    if n_retrains == 0 {
        return Err(PruneError::Config("need at least one retrain".into()));
    }
    table.validate_against(train_ds)?;
    let kept = select(table, policy, fraction, base_seed)?;
    let subset = take_subset(train_ds, &kept)?;
    if config.batch_size > subset.len() {
        return Err(PruneError::Config(format!(
            "kept subset has {} examples, below the batch size {}",
            subset.len(),
            config.batch_size
        )));
    }
    let mut outcomes = Vec::with_capacity(n_retrains);
    for r in 0..n_retrains as u64 {
        let mut rc = config.clone();
        rc.init_seed = seeds::derive(base_seed, seeds::tag::RETRAIN, 2 * r);
        rc.data_order_seed = seeds::derive(base_seed, seeds::tag::RETRAIN, 2 * r + 1);
        rc.schedule_n = Some(train_ds.len());
        let out = train::<T>(spec, &subset, None, &rc)?;
        let last = out
            .trajectory
            .last()
            .expect("a finished run has a final checkpoint");
        let eval = evaluate(&last.params::<T>()?, &last.spec, test_ds)?;
        let final_train_loss = out
            .metrics
            .last()
            .expect("a finished run has epoch metrics")
            .train_loss;
        outcomes.push(RetrainOutcome {
            seed: rc.init_seed,
            test_accuracy: eval.accuracy,
            final_train_loss,
        });
    }
    let mut accs: Vec<f64> = outcomes.iter().map(|o| o.test_accuracy).collect();
    accs.sort_by(|a, b| a.partial_cmp(b).expect("accuracies are finite"));
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(PruneResult {
        score_kind: table.kind,
        score_epoch: table.epoch,
        policy,
        fraction,
        kept: kept.len(),
        outcomes,
        mean_test_accuracy: mean,
        band_low: percentile(&accs, 16.0),
        band_high: percentile(&accs, 84.0),
    })
}

/// Retrain at each kept fraction with a fixed policy.
#[allow(clippy::too_many_arguments)]
pub fn sweep_fraction<T: Scalar>(
    spec: &ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
    table: &ScoreTable,
    policy: SelectionPolicy,
    fractions: &[f64],
    n_retrains: usize,
    base_seed: u64,
) -> Result<Vec<PruneResult>, PruneError> {
    if fractions.is_empty() {
        return Err(PruneError::Config("no fractions to sweep".into()));
    }
    fractions
        .iter()
        .map(|&f| {
            prune_and_retrain::<T>(
                spec, train_ds, test_ds, config, table, policy, f, n_retrains, base_seed,
            )
        })
        .collect()
}

/// Retrain a fixed-size window at each offset down the score ordering.
#[allow(clippy::too_many_arguments)]
pub fn sweep_window<T: Scalar>(
    spec: &ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
    table: &ScoreTable,
    fraction: f64,
    offsets: &[f64],
    n_retrains: usize,
    base_seed: u64,
) -> Result<Vec<PruneResult>, PruneError> {
    if offsets.is_empty() {
        return Err(PruneError::Config("no window offsets to sweep".into()));
    }
    offsets
        .iter()
        .map(|&offset| {
            prune_and_retrain::<T>(
                spec,
                train_ds,
                test_ds,
                config,
                table,
                SelectionPolicy::Window { offset },
                fraction,
                n_retrains,
                base_seed,
            )
        })
        .collect()
}

/// One CSV row per retrain outcome:
/// `score_kind,score_epoch,policy,fraction,offset,retrain_seed,test_accuracy,final_train_loss`.
pub fn write_results_csv(results: &[PruneResult], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "score_kind,score_epoch,policy,fraction,offset,retrain_seed,test_accuracy,final_train_loss"
    )?;
    for r in results {
        for o in &r.outcomes {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.score_kind,
                r.score_epoch,
                r.policy.name(),
                r.fraction,
                r.policy.offset(),
                o.seed,
                o.test_accuracy,
                o.final_train_loss
            )?;
        }
    }
    Ok(())
}

/// Sweep summary (means and 16th-84th percentile bands) as pretty JSON.
#[derive(Serialize)]
struct SweepSummary<'a> {
    results: &'a [PruneResult],
}

pub fn write_summary_json(results: &[PruneResult], path: &Path) -> Result<(), PruneError> {
    let json = serde_json::to_vec_pretty(&SweepSummary { results }).map_err(|e| PruneError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    crate::fsio::write_atomic(path, &json).map_err(|e| PruneError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })
}
