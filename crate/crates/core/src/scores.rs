//! Per-example importance scores.
//!
//! Three families, all higher-means-harder:
//!
//! * **gradient-norm score** (`grand`): L2 norm of the per-example
//!   cross-entropy gradient at a checkpoint. Weight decay is an optimizer
//!   term, not part of the example loss, so it is excluded.
//! * **error-norm score** (`el2n`): L2 distance between the softmax output
//!   and the one-hot label; always in `[0, sqrt(2)]`.
//! * **forgetting count** (`forget`): number of correct-to-incorrect
//!   transitions across a run's ordered presentations. Examples that are
//!   never classified correctly get a sentinel value of one more than the
//!   largest finite count in the table.
//!
//! Scores from several independently seeded runs are averaged id-wise;
//! forgetting tables containing sentinel entries are excluded from averages
//! because the sentinel is a censoring marker, not a count.
//!
//! On disk a table is a two-column CSV (`example_id,score`) plus a JSON
//! sidecar carrying kind, epoch, seeds, and the dataset digest. A bare CSV
//! without a sidecar loads as kind `external`.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{Exec, ModelSpec, NnError, ParamVector};
use crate::scalar::Scalar;
use crate::seeds;
use crate::trainer::{
    train, Checkpoint, Engine, PresentationLog, TrainConfig, TrainError,
};

/// Examples per parallel scoring chunk (per-example scores are independent,
/// so chunking affects speed only, never results).
const SCORE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid scoring request: {0}")]
    Config(String),
    #[error("score table does not cover example id {id} ({context})")]
    IdMismatch { id: u64, context: &'static str },
    #[error("correlation undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("score io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed score file {path}, line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Which scoring rule produced a table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Grand,
    El2n,
    Forget,
    /// Ingested from a bare CSV produced outside this toolkit.
    External,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Grand => "grand",
            ScoreKind::El2n => "el2n",
            ScoreKind::Forget => "forget",
            ScoreKind::External => "external",
        })
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grand" => Ok(ScoreKind::Grand),
            "el2n" => Ok(ScoreKind::El2n),
            "forget" => Ok(ScoreKind::Forget),
            "external" => Ok(ScoreKind::External),
            other => Err(format!(
                "unknown score kind {other:?} (expected grand, el2n, forget, or external)"
            )),
        }
    }
}

/// One finite score per example id, plus provenance.
///
/// Entries are kept sorted by id and cover each id exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub kind: ScoreKind,
    /// Checkpoint epoch the scores were computed at (for forgetting counts:
    /// the number of epochs the log covers).
    pub epoch: usize,
    entries: Vec<(u64, f64)>,
    /// Seeds of the runs that contributed, in (init, data-order) pairs.
    pub seeds: Vec<u64>,
    pub dataset_digest: String,
    /// Sentinel value assigned to never-learned examples, when any exist
    /// (forgetting tables only).
    pub sentinel: Option<f64>,
}

impl ScoreTable {
    /// Build a table from raw `(id, score)` pairs; sorts by id and rejects
    /// duplicates and non-finite scores.
    pub fn new(
        kind: ScoreKind,
        epoch: usize,
        mut entries: Vec<(u64, f64)>,
        seeds: Vec<u64>,
        dataset_digest: String,
    ) -> Result<Self, ScoreError> {
        if entries.is_empty() {
            return Err(ScoreError::Config("score table must be non-empty".into()));
        }
        if let Some(&(id, s)) = entries.iter().find(|(_, s)| !s.is_finite()) {
            return Err(ScoreError::Config(format!(
                "non-finite score {s} for example id {id}"
            )));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ScoreError::Config(format!(
                "duplicate score entry for example id {}",
                w[0].0
            )));
        }
        Ok(ScoreTable {
            kind,
            epoch,
            entries,
            seeds,
            dataset_digest,
            sentinel: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(id, score)` pairs in ascending id order.
    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// Scores for the given ids, in the given order; errors on any id the
    /// table does not cover.
    pub fn values_for(&self, ids: &[u64], context: &'static str) -> Result<Vec<f64>, ScoreError> {
        ids.iter()
            .map(|&id| self.get(id).ok_or(ScoreError::IdMismatch { id, context }))
            .collect()
    }

    /// Check that the table covers exactly the dataset's ids.
    pub fn validate_against(&self, dataset: &Dataset) -> Result<(), ScoreError> {
        for &id in dataset.ids() {
            if self.get(id).is_none() {
                return Err(ScoreError::IdMismatch {
                    id,
                    context: "dataset id missing from score table",
                });
            }
        }
        if self.len() != dataset.len() {
            // Table covers all dataset ids and is bigger: find an extra.
            let extra = self
                .entries
                .iter()
                .map(|e| e.0)
                .find(|id| !dataset.ids().contains(id))
                .unwrap_or_default();
            return Err(ScoreError::IdMismatch {
                id: extra,
                context: "score table id missing from dataset",
            });
        }
        Ok(())
    }
}

fn score_each<T: Scalar, F>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    dataset: &Dataset,
    per_example: F,
) -> Result<Vec<f64>, ScoreError>
where
    F: Fn(&mut Exec<T>, &[T], usize) -> f64 + Sync,
{
    if dataset.is_empty() {
        return Err(ScoreError::Config("cannot score an empty dataset".into()));
    }
    // Validate once so the per-chunk contexts cannot fail.
    let probe = Exec::<T>::new(spec)?;
    probe.check_params(params)?;
    if dataset.input_dim() != spec.input_dim {
        return Err(ScoreError::Nn(NnError::Shape {
            what: "dataset feature dimension",
            expected: spec.input_dim,
            got: dataset.input_dim(),
        }));
    }
    if dataset.classes() > spec.classes {
        return Err(ScoreError::Config(format!(
            "dataset has {} classes but the model outputs {}",
            dataset.classes(),
            spec.classes
        )));
    }
    let mut scores = vec![0.0f64; dataset.len()];
    scores
        .par_chunks_mut(SCORE_CHUNK)
        .enumerate()
        .for_each(|(chunk_idx, out)| {
            let mut exec = Exec::<T>::new(spec).expect("spec validated above");
            let base = chunk_idx * SCORE_CHUNK;
            for (j, slot) in out.iter_mut().enumerate() {
                let i = base + j;
                exec.load_input(dataset.input(i));
                *slot = per_example(&mut exec, params.as_slice(), dataset.label(i));
            }
        });
    Ok(scores)
}

/// Gradient-norm scores of one checkpoint: per example, the L2 norm of the
/// cross-entropy gradient (squared norm accumulated in f64).
pub fn grand_single<T: Scalar>(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
) -> Result<ScoreTable, ScoreError> {
    let params = checkpoint.params::<T>()?;
    let dim = params.len();
    let scores = score_each(&checkpoint.spec, &params, dataset, |exec, params, label| {
        let mut grad = vec![T::zero(); dim];
        exec.grad_accumulate(params, label, &mut grad);
        crate::linalg::l2_norm(&grad)
    })?;
    let entries = dataset.ids().iter().copied().zip(scores).collect();
    ScoreTable::new(
        ScoreKind::Grand,
        checkpoint.epoch,
        entries,
        vec![checkpoint.init_seed, checkpoint.data_order_seed],
        dataset.digest(),
    )
}

/// Error-norm scores of one checkpoint: per example, the L2 distance between
/// the softmax output and the one-hot label.
pub fn el2n_single<T: Scalar>(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
) -> Result<ScoreTable, ScoreError> {
    let params = checkpoint.params::<T>()?;
    let scores = score_each(&checkpoint.spec, &params, dataset, |exec, params, label| {
        exec.logits(params);
        let probs = exec.probs();
        let mut sq = 0.0f64;
        for (k, &p) in probs.iter().enumerate() {
            let y = if k == label { 1.0 } else { 0.0 };
            let d = p.as_f64() - y;
            sq += d * d;
        }
        sq.sqrt()
    })?;
    let entries = dataset.ids().iter().copied().zip(scores).collect();
    ScoreTable::new(
        ScoreKind::El2n,
        checkpoint.epoch,
        entries,
        vec![checkpoint.init_seed, checkpoint.data_order_seed],
        dataset.digest(),
    )
}

/// Forgetting counts from one run's presentation log.
///
/// A forgetting event is a presentation classified incorrectly whose
/// previous presentation was classified correctly. Never-learned examples
/// (no correct presentation at all) get `max finite count + 1` and the
/// table's `sentinel` field records that value.
pub fn forgetting_scores(
    log: &PresentationLog,
    dataset: &Dataset,
    seeds: Vec<u64>,
) -> Result<ScoreTable, ScoreError> {
    if !log.is_complete() {
        return Err(ScoreError::Config(
            "forgetting counts need a complete log (every example once per epoch)".into(),
        ));
    }
    if log.ids() != dataset.ids() {
        let id = log
            .ids()
            .iter()
            .zip(dataset.ids())
            .find(|(a, b)| a != b)
            .map(|(&a, _)| a)
            .unwrap_or_default();
        return Err(ScoreError::IdMismatch {
            id,
            context: "presentation log does not match dataset",
        });
    }
    let mut counts = vec![0u64; log.len()];
    let mut learned = vec![false; log.len()];
    for i in 0..log.len() {
        let mut prev_correct = false;
        for &(_, correct) in log.events(i) {
            if prev_correct && !correct {
                counts[i] += 1;
            }
            learned[i] |= correct;
            prev_correct = correct;
        }
    }
    let max_finite = counts
        .iter()
        .zip(&learned)
        .filter(|&(_, &l)| l)
        .map(|(&c, _)| c)
        .max()
        .unwrap_or(0);
    let sentinel = (max_finite + 1) as f64;
    let any_unlearned = learned.iter().any(|&l| !l);
    let entries = (0..log.len())
        .map(|i| {
            let score = if learned[i] { counts[i] as f64 } else { sentinel };
            (log.ids()[i], score)
        })
        .collect();
    let mut table = ScoreTable::new(
        ScoreKind::Forget,
        log.epochs_logged(),
        entries,
        seeds,
        dataset.digest(),
    )?;
    table.sentinel = any_unlearned.then_some(sentinel);
    Ok(table)
}

/// Id-wise mean of tables from independently seeded runs.
///
/// All tables must agree on kind, epoch, id set, and dataset digest.
/// Forgetting tables with sentinel entries are dropped before averaging;
/// it is an error if that leaves nothing.
pub fn average_scores(tables: &[ScoreTable]) -> Result<ScoreTable, ScoreError> {
    if tables.is_empty() {
        return Err(ScoreError::Config("no score tables to average".into()));
    }
    let first = &tables[0];
    for t in tables.iter().skip(1) {
        if t.kind != first.kind || t.epoch != first.epoch {
            return Err(ScoreError::Config(format!(
                "cannot average {}@{} with {}@{}",
                t.kind, t.epoch, first.kind, first.epoch
            )));
        }
        if t.dataset_digest != first.dataset_digest {
            return Err(ScoreError::Config(
                "cannot average scores computed on different datasets".into(),
            ));
        }
    }
    let usable: Vec<&ScoreTable> = tables.iter().filter(|t| t.sentinel.is_none()).collect();
    if usable.is_empty() {
        return Err(ScoreError::Config(
            "every run left at least one example never learned; counts are censored".into(),
        ));
    }
    let base = usable[0];
    let mut sums: Vec<(u64, f64)> = base.entries().to_vec();
    for t in usable.iter().skip(1) {
        if t.len() != base.len() {
            return Err(ScoreError::IdMismatch {
                id: 0,
                context: "averaged tables cover different id sets",
            });
        }
        for (acc, e) in sums.iter_mut().zip(t.entries()) {
            if acc.0 != e.0 {
                return Err(ScoreError::IdMismatch {
                    id: e.0,
                    context: "averaged tables cover different id sets",
                });
            }
            acc.1 += e.1;
        }
    }
    let inv = 1.0 / usable.len() as f64;
    for e in sums.iter_mut() {
        e.1 *= inv;
    }
    let seeds = usable.iter().flat_map(|t| t.seeds.iter().copied()).collect();
    ScoreTable::new(
        first.kind,
        first.epoch,
        sums,
        seeds,
        first.dataset_digest.clone(),
    )
}

/// Train `n_runs` independently seeded runs and average the requested score.
///
/// Run `r` uses `init = derive(base_seed, SCORE_RUN, 2r)` and
/// `order = derive(base_seed, SCORE_RUN, 2r+1)`. Gradient-norm and
/// error-norm scores are taken at the checkpoint after `score_epoch` epochs
/// (0 = the seeded initialization, before any step); forgetting counts use
/// the full run.
pub fn score_over_runs<T: Scalar>(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    kind: ScoreKind,
    score_epoch: usize,
    n_runs: usize,
    base_seed: u64,
) -> Result<ScoreTable, ScoreError> {
    if n_runs == 0 {
        return Err(ScoreError::Config("need at least one scoring run".into()));
    }
    if kind == ScoreKind::External {
        return Err(ScoreError::Config(
            "external scores are ingested from files, not computed".into(),
        ));
    }
    if kind != ScoreKind::Forget && score_epoch > config.epochs {
        return Err(ScoreError::Config(format!(
            "score epoch {} beyond the {}-epoch schedule",
            score_epoch, config.epochs
        )));
    }
    let mut tables = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let mut run_config = config.clone();
        run_config.init_seed = seeds::derive(base_seed, seeds::tag::SCORE_RUN, 2 * r as u64);
        run_config.data_order_seed =
            seeds::derive(base_seed, seeds::tag::SCORE_RUN, 2 * r as u64 + 1);
        let table = match kind {
            ScoreKind::Forget => {
                let out = train::<T>(spec, dataset, None, &run_config)?;
                forgetting_scores(
                    &out.log,
                    dataset,
                    vec![run_config.init_seed, run_config.data_order_seed],
                )?
            }
            _ => {
                let mut engine = Engine::<T>::new(spec, dataset, &run_config)?;
                let mut sink = Vec::new();
                engine.run_until_epoch(score_epoch, None, &mut sink)?;
                let ckpt = engine.checkpoint();
                match kind {
                    ScoreKind::Grand => grand_single::<T>(&ckpt, dataset)?,
                    ScoreKind::El2n => el2n_single::<T>(&ckpt, dataset)?,
                    _ => unreachable!(),
                }
            }
        };
        tables.push(table);
    }
    average_scores(&tables)
}

/// Spearman rank correlation between two tables over the same id set.
///
/// Mid-ranks: tied values share the mean of the rank positions they occupy.
/// A constant table has no ranking, so correlation is undefined.
pub fn spearman(a: &ScoreTable, b: &ScoreTable) -> Result<f64, ScoreError> {
    if a.len() != b.len() {
        let (longer, shorter, ctx): (&ScoreTable, &ScoreTable, &'static str) = if a.len() > b.len()
        {
            (a, b, "second table missing an id the first has")
        } else {
            (b, a, "first table missing an id the second has")
        };
        let id = longer
            .entries()
            .iter()
            .map(|e| e.0)
            .find(|&id| shorter.get(id).is_none())
            .unwrap_or_default();
        return Err(ScoreError::IdMismatch { id, context: ctx });
    }
    if a.len() < 3 {
        return Err(ScoreError::Config(
            "rank correlation needs at least 3 examples".into(),
        ));
    }
    let mut vb = Vec::with_capacity(a.len());
    for &(id, _) in a.entries() {
        match b.get(id) {
            Some(v) => vb.push(v),
            None => {
                return Err(ScoreError::IdMismatch {
                    id,
                    context: "second table missing an id the first has",
                })
            }
        }
    }
    let va: Vec<f64> = a.entries().iter().map(|e| e.1).collect();
    let ra = midranks(&va);
    let rb = midranks(&vb);
    pearson(&ra, &rb)
}

/// Mid-ranks (1-based; ties get the mean of their positions).
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite scores"));
    let mut ranks = vec![0.0f64; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // Positions start..end (0-based) share the mean 1-based rank.
        let mean_rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = mean_rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, ScoreError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ScoreError::Undefined(
            "at least one score table is constant over the id set".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

// ---------------------------------------------------------------------------
// File IO: CSV + JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: ScoreKind,
    epoch: usize,
    seeds: Vec<u64>,
    dataset_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentinel: Option<f64>,
}

fn io_err(path: &Path, message: impl fmt::Display) -> ScoreError {
    ScoreError::Io {
        path: path.to_owned(),
        message: message.to_string(),
    }
}

use crate::fsio::write_atomic;

/// The sidecar path of a score CSV (same stem, `.json`).
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Save a table as CSV plus its JSON sidecar.
pub fn save_score_table(table: &ScoreTable, csv_path: &Path) -> Result<(), ScoreError> {
    let mut csv = String::from("example_id,score\n");
    for &(id, score) in table.entries() {
        csv.push_str(&format!("{id},{score}\n"));
    }
    write_atomic(csv_path, csv.as_bytes()).map_err(|e| io_err(csv_path, e))?;
    let sidecar = Sidecar {
        kind: table.kind,
        epoch: table.epoch,
        seeds: table.seeds.clone(),
        dataset_digest: table.dataset_digest.clone(),
        sentinel: table.sentinel,
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| io_err(csv_path, e))?;
    let side = sidecar_path(csv_path);
    write_atomic(&side, &json).map_err(|e| io_err(&side, e))
}

/// Load a table saved by [`save_score_table`], or a bare external CSV (no
/// sidecar): two columns `example_id,score`, finite scores, unique ids.
pub fn load_score_table(csv_path: &Path) -> Result<ScoreTable, ScoreError> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| io_err(csv_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "example_id,score" => {}
        Some((_, header)) => {
            return Err(ScoreError::Format {
                path: csv_path.to_owned(),
                line: 1,
                message: format!("expected header \"example_id,score\", got {header:?}"),
            })
        }
        None => {
            return Err(ScoreError::Format {
                path: csv_path.to_owned(),
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| ScoreError::Format {
            path: csv_path.to_owned(),
            line: i + 1,
            message,
        };
        let (id_s, score_s) = line
            .split_once(',')
            .ok_or_else(|| bad("expected two comma-separated columns".into()))?;
        let id: u64 = id_s
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad example id {id_s:?}: {e}")))?;
        let score: f64 = score_s
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad score {score_s:?}: {e}")))?;
        entries.push((id, score));
    }
    let side = sidecar_path(csv_path);
    let (kind, epoch, seeds, digest, sentinel) = if side.exists() {
        let raw = std::fs::read(&side).map_err(|e| io_err(&side, e))?;
        let sc: Sidecar = serde_json::from_slice(&raw).map_err(|e| io_err(&side, e))?;
        (sc.kind, sc.epoch, sc.seeds, sc.dataset_digest, sc.sentinel)
    } else {
        (ScoreKind::External, 0, Vec::new(), String::new(), None)
    };
    let mut table = ScoreTable::new(kind, epoch, entries, seeds, digest)?;
    table.sentinel = sentinel;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticTaskSpec};
    use crate::nn::init_params;

    fn table(kind: ScoreKind, values: &[f64]) -> ScoreTable {
        let entries = values
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as u64, v))
            .collect();
        ScoreTable::new(kind, 0, entries, vec![], String::new()).unwrap()
    }

    fn tiny_task(n: usize, classes: usize, seed: u64) -> Dataset {
        let spec = SyntheticTaskSpec {
            classes,
            input_dim: 4,
            clusters_per_class: 1,
            separation: 3.0,
            cluster_std: 0.5,
            label_noise: 0.0,
            n_train: n,
            n_test: 2,
            seed,
            image: None,
        };
        generate_synthetic(&spec).unwrap().0
    }

    /// Checkpoint wrapper around explicit params for score tests.
    fn ckpt_from(spec: &ModelSpec, params: &ParamVector<f64>, epoch: usize) -> Checkpoint {
        Checkpoint {
            epoch,
            step: 0,
            spec: spec.clone(),
            config_digest: String::new(),
            data_order_seed: 0,
            init_seed: spec.init_seed,
            weights: params.as_slice().iter().map(|&w| w as f32).collect(),
            velocity: vec![0.0; params.len()],
        }
    }

    #[test]
    fn error_norm_of_uniform_probabilities_matches_closed_form() {
        // Zero weights => uniform softmax. For K classes the distance to a
        // one-hot label is sqrt((1-1/K)^2 + (K-1)/K^2) = sqrt(1 - 1/K).
        for classes in [2usize, 5, 10] {
            let ds = tiny_task(12, classes, classes as u64);
            let spec = ModelSpec::mlp(vec![4, classes], 0);
            let layout = std::sync::Arc::new(crate::nn::ParamLayout::for_spec(&spec).unwrap());
            let zero = ParamVector::<f64>::zeros(layout);
            let t = el2n_single::<f64>(&ckpt_from(&spec, &zero, 0), &ds).unwrap();
            let expect = (1.0 - 1.0 / classes as f64).sqrt();
            for &(_, s) in t.entries() {
                assert!((s - expect).abs() < 1e-7, "K={classes}: {s} vs {expect}");
            }
        }
    }

    #[test]
    fn error_norm_matches_hand_computed_probabilities() {
        // Bias-only linear model on a zero input: logits are the biases.
        // b = (ln 4, 0) gives p = (0.8, 0.2); label 0 => ||p - y|| = 0.2*sqrt(2).
        let spec = ModelSpec::mlp(vec![2, 2], 0);
        let layout = std::sync::Arc::new(crate::nn::ParamLayout::for_spec(&spec).unwrap());
        let mut params = ParamVector::<f64>::zeros(layout);
        params.block_mut("layer0.bias").unwrap()[0] = 4.0f64.ln();
        let ds = Dataset::from_parts(
            "two-points".into(),
            2,
            2,
            None,
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![7, 9],
            vec![0, 1],
            vec![0, 1],
            vec![false, false],
        )
        .unwrap();
        let t = el2n_single::<f64>(&ckpt_from(&spec, &params, 0), &ds).unwrap();
        // Checkpoints store weights in f32, so ln(4) is rounded to storage
        // precision before the softmax; allow that rounding in the oracle.
        assert!((t.get(7).unwrap() - 0.2 * 2.0f64.sqrt()).abs() < 1e-7);
        assert!((t.get(9).unwrap() - 0.8 * 2.0f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn gradient_norm_matches_linear_model_closed_form() {
        // For a linear softmax model, grad = (p - y) (x) [x; 1], so its norm
        // factorizes as ||p - y|| * sqrt(||x||^2 + 1).
        let classes = 3;
        let ds = tiny_task(10, classes, 1);
        let spec = ModelSpec::mlp(vec![4, classes], 5);
        let params = init_params::<f64>(&spec).unwrap();
        let ckpt = ckpt_from(&spec, &params, 0);
        // ckpt stores f32 weights; recompute the closed form at exactly
        // those weights.
        let stored = ckpt.params::<f64>().unwrap();
        let grand = grand_single::<f64>(&ckpt, &ds).unwrap();
        let el2n = el2n_single::<f64>(&ckpt, &ds).unwrap();
        for i in 0..ds.len() {
            let id = ds.ids()[i];
            let x2: f64 = ds.input(i).iter().map(|&v| (v as f64) * (v as f64)).sum();
            let expect = el2n.get(id).unwrap() * (x2 + 1.0).sqrt();
            let got = grand.get(id).unwrap();
            assert!(
                (got - expect).abs() <= 1e-10 * expect.max(1e-3),
                "example {id}: {got} vs {expect}"
            );
        }
        let _ = stored;
    }

    #[test]
    fn gradient_norm_is_bounded_by_error_norm_times_row_norms() {
        // Chain rule: grad = sum_k (p - y)_k psi_k, so Cauchy-Schwarz gives
        // ||grad|| <= ||p - y|| * sqrt(sum_k ||psi_k||^2). Checked on >= 100
        // (example, model) pairs with a 1e-8 relative slack.
        let mut pairs = 0usize;
        for (m, &hidden) in [6usize, 10, 14].iter().enumerate() {
            let classes = 3 + m; // 3, 4, 5
            let ds = tiny_task(40, classes, 100 + m as u64);
            let spec = ModelSpec::mlp(vec![4, hidden, classes], 20 + m as u64);
            let params = init_params::<f64>(&spec).unwrap();
            let dim = params.len();
            let mut exec = Exec::<f64>::new(&spec).unwrap();
            let mut jac = vec![0.0f64; classes * dim];
            for i in 0..ds.len() {
                let x: Vec<f64> = ds.input(i).iter().map(|&v| v as f64).collect();
                let g = crate::nn::example_gradient(&spec, &params, &x, ds.label(i)).unwrap();
                let gn = crate::linalg::l2_norm(g.as_slice());
                exec.load_input_t(&x);
                exec.logits(params.as_slice());
                let probs: Vec<f64> = exec.probs().to_vec();
                exec.jacobian_rows(params.as_slice(), &mut jac);
                let mut err_sq = 0.0;
                for (k, &p) in probs.iter().enumerate() {
                    let y = if k == ds.label(i) { 1.0 } else { 0.0 };
                    err_sq += (p - y) * (p - y);
                }
                let rows_sq: f64 = jac.iter().map(|&v| v * v).sum();
                let bound = err_sq.sqrt() * rows_sq.sqrt();
                assert!(
                    gn <= bound * (1.0 + 1e-8),
                    "example {i}: ||g||={gn} > bound={bound}"
                );
                pairs += 1;
            }
        }
        assert!(pairs >= 100);
    }

    #[test]
    fn forgetting_counts_transitions_and_flags_never_learned() {
        let ids = vec![0u64, 1, 2, 3];
        let ev = |pattern: &[bool]| -> Vec<(u64, bool)> {
            pattern
                .iter()
                .enumerate()
                .map(|(e, &c)| (e as u64, c))
                .collect()
        };
        let events = vec![
            ev(&[true, false, true, false]),
            ev(&[false, false, true, true]),
            ev(&[true, true, true, true]),
            ev(&[false, false, false, false]),
        ];
        let log = PresentationLog::from_events_for_tests(ids, events, 4, 1);
        let ds = tiny_task(4, 2, 3);
        let t = forgetting_scores(&log, &ds, vec![1, 2]).unwrap();
        assert_eq!(t.get(0), Some(2.0)); // two correct->incorrect drops
        assert_eq!(t.get(1), Some(0.0));
        assert_eq!(t.get(2), Some(0.0));
        assert_eq!(t.get(3), Some(3.0)); // never learned: max finite (2) + 1
        assert_eq!(t.sentinel, Some(3.0));
        assert_eq!(t.epoch, 4);
    }

    #[test]
    fn averaging_is_idwise_mean_and_drops_censored_tables() {
        let a = table(ScoreKind::El2n, &[1.0, 2.0, 3.0]);
        let b = table(ScoreKind::El2n, &[3.0, 2.0, 1.0]);
        let avg = average_scores(&[a, b]).unwrap();
        assert_eq!(avg.get(0), Some(2.0));
        assert_eq!(avg.get(1), Some(2.0));
        assert_eq!(avg.get(2), Some(2.0));

        let clean = table(ScoreKind::Forget, &[1.0, 0.0, 2.0]);
        let mut censored = table(ScoreKind::Forget, &[9.0, 9.0, 9.0]);
        censored.sentinel = Some(9.0);
        let avg = average_scores(&[clean.clone(), censored.clone()]).unwrap();
        assert_eq!(avg.entries(), clean.entries());
        assert!(average_scores(&[censored]).is_err());
    }

    #[test]
    fn averaging_rejects_mismatched_tables() {
        let a = table(ScoreKind::El2n, &[1.0, 2.0, 3.0]);
        let b = table(ScoreKind::Grand, &[1.0, 2.0, 3.0]);
        assert!(average_scores(&[a.clone(), b]).is_err());
        let mut c = table(ScoreKind::El2n, &[1.0, 2.0, 3.0]);
        c.epoch = 1;
        assert!(average_scores(&[a, c]).is_err());
    }

    #[test]
    fn rank_correlation_matches_hand_cases() {
        let a = table(ScoreKind::External, &[1.0, 2.0, 3.0, 4.0]);
        let b = table(ScoreKind::External, &[10.0, 20.0, 30.0, 40.0]);
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let rev = table(ScoreKind::External, &[4.0, 3.0, 2.0, 1.0]);
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);

        let x = table(ScoreKind::External, &[1.0, 2.0, 3.0]);
        let y = table(ScoreKind::External, &[2.0, 1.0, 3.0]);
        assert!((spearman(&x, &y).unwrap() - 0.5).abs() < 1e-12);

        // Ties take mid-ranks: [1,1,2] vs [1,2,3] => sqrt(3)/2.
        let tied = table(ScoreKind::External, &[1.0, 1.0, 2.0]);
        let lin = table(ScoreKind::External, &[1.0, 2.0, 3.0]);
        let expect = 3.0f64.sqrt() / 2.0;
        assert!((spearman(&tied, &lin).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rank_correlation_rejects_degenerate_inputs() {
        let flat = table(ScoreKind::External, &[5.0, 5.0, 5.0]);
        let lin = table(ScoreKind::External, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            spearman(&flat, &lin),
            Err(ScoreError::Undefined(_))
        ));
        let a = table(ScoreKind::External, &[1.0, 2.0]);
        let b = table(ScoreKind::External, &[2.0, 1.0]);
        assert!(spearman(&a, &b).is_err());

        let four = table(ScoreKind::External, &[1.0, 2.0, 3.0, 4.0]);
        match spearman(&four, &lin) {
            Err(ScoreError::IdMismatch { id, .. }) => assert_eq!(id, 3),
            other => panic!("expected id mismatch, got {other:?}"),
        }
    }

    #[test]
    fn multi_run_scores_average_the_single_run_tables() {
        let ds = tiny_task(24, 3, 11);
        let spec = ModelSpec::mlp(vec![4, 6, 3], 0);
        let config = TrainConfig {
            batch_size: 8,
            epochs: 2,
            lr_decay_epochs: vec![],
            score_epochs: vec![0, 1],
            ..TrainConfig::default()
        };
        let avg =
            score_over_runs::<f64>(&spec, &ds, &config, ScoreKind::El2n, 1, 2, 42).unwrap();

        let mut manual = Vec::new();
        for r in 0..2u64 {
            let mut rc = config.clone();
            rc.init_seed = seeds::derive(42, seeds::tag::SCORE_RUN, 2 * r);
            rc.data_order_seed = seeds::derive(42, seeds::tag::SCORE_RUN, 2 * r + 1);
            let out = train::<f64>(&spec, &ds, None, &rc).unwrap();
            manual.push(el2n_single::<f64>(out.trajectory.at_epoch(1).unwrap(), &ds).unwrap());
        }
        let expect = average_scores(&manual).unwrap();
        assert_eq!(avg.entries(), expect.entries());
        assert_eq!(avg.seeds.len(), 4);
        // Distinct seed pairs per run.
        assert_ne!(avg.seeds[0], avg.seeds[2]);
        assert_ne!(avg.seeds[1], avg.seeds[3]);
    }

    #[test]
    fn epoch_zero_scores_the_seeded_initialization() {
        let ds = tiny_task(12, 3, 13);
        let spec = ModelSpec::mlp(vec![4, 3], 0);
        let config = TrainConfig {
            batch_size: 4,
            epochs: 1,
            lr_decay_epochs: vec![],
            score_epochs: vec![0],
            ..TrainConfig::default()
        };
        let t = score_over_runs::<f64>(&spec, &ds, &config, ScoreKind::Grand, 0, 1, 7).unwrap();
        // Recompute directly at the derived init, no training.
        let mut spec_r = spec.clone();
        spec_r.init_seed = seeds::derive(7, seeds::tag::SCORE_RUN, 0);
        let params = init_params::<f64>(&spec_r).unwrap();
        let ckpt = ckpt_from(&spec_r, &params, 0);
        let direct = grand_single::<f64>(&ckpt, &ds).unwrap();
        for (a, b) in t.entries().iter().zip(direct.entries()) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn score_files_round_trip_and_bare_csv_loads_as_external() {
        let dir = std::env::temp_dir().join(format!("ddscore-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let mut t = table(ScoreKind::Forget, &[0.25, 3.0, 1.5]);
        t.epoch = 8;
        t.seeds = vec![11, 12];
        t.dataset_digest = "abcd1234abcd1234".into();
        t.sentinel = Some(3.0);
        let path = dir.join("forget.csv");
        save_score_table(&t, &path).unwrap();
        let back = load_score_table(&path).unwrap();
        assert_eq!(back, t);

        let bare = dir.join("imported.csv");
        std::fs::write(&bare, "example_id,score\n5,0.5\n3,1.25\n").unwrap();
        let ext = load_score_table(&bare).unwrap();
        assert_eq!(ext.kind, ScoreKind::External);
        assert_eq!(ext.get(3), Some(1.25));
        assert_eq!(ext.get(5), Some(0.5));

        let bad = dir.join("bad.csv");
        std::fs::write(&bad, "example_id,score\n1,notanumber\n").unwrap();
        match load_score_table(&bad) {
            Err(ScoreError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tables_reject_duplicates_and_non_finite_scores() {
        let dup = vec![(1u64, 0.5), (1u64, 0.7)];
        assert!(ScoreTable::new(ScoreKind::External, 0, dup, vec![], String::new()).is_err());
        let nan = vec![(1u64, f64::NAN)];
        assert!(ScoreTable::new(ScoreKind::External, 0, nan, vec![], String::new()).is_err());
    }
}
