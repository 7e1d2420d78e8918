//! Training-dynamics probes: kernel velocity and error barriers.
//!
//! **Kernel velocity.** At a checkpoint, the logit Jacobian of a chosen
//! example subset (rows example-major, logit-minor) induces a gram matrix
//! `K = Psi Psi^T`, the empirical tangent kernel restricted to that subset.
//! Velocity between adjacent-epoch checkpoints is one minus the Frobenius
//! cosine of the two grams: 0 means the kernel froze, larger means data-
//! dependent feature learning is still moving it. The profile buckets
//! examples by score rank so velocity can be compared across difficulty
//! bands.
//!
//! **Error barriers.** Two weight vectors are linearly mode-connected when
//! training error along the segment between them never exceeds the linear
//! interpolation of the endpoint errors. The barrier is the largest such
//! excess over an alpha grid; spawned child runs (same weights and momentum
//! at the branch point, different data order from there on) measure when in
//! training the outcome basin stops depending on minibatch order.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::linalg;
use crate::nn::{Exec, ModelSpec, NnError, ParamVector};
use crate::scalar::Scalar;
use crate::scores::{ScoreError, ScoreTable};
use crate::seeds;
use crate::trainer::{evaluate, Checkpoint, Engine, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum DynError {
    #[error("invalid dynamics request: {0}")]
    Config(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Dense symmetric gram matrix of logit-Jacobian rows, accumulated in f64.
///
/// Row `e * classes + k` belongs to logit `k` of the `e`-th chosen example.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
    example_ids: Vec<u64>,
    classes: usize,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn example_ids(&self) -> &[u64] {
        &self.example_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Builds a gram from row-major entries computed elsewhere.
    ///
    /// `data` must hold `(example_ids.len() * classes)^2` finite values.
    pub fn from_parts(
        data: Vec<f64>,
        example_ids: Vec<u64>,
        classes: usize,
    ) -> Result<GramMatrix, DynError> {
        if classes == 0 {
            return Err(DynError::Config("gram needs at least one class".into()));
        }
        let n = example_ids.len() * classes;
        if n == 0 {
            return Err(DynError::Config("gram needs at least one example".into()));
        }
        if data.len() != n * n {
            return Err(DynError::Config(format!(
                "gram data holds {} entries, expected {}",
                data.len(),
                n * n
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DynError::Config("gram entries must be finite".into()));
        }
        Ok(GramMatrix {
            n,
            data,
            example_ids,
            classes,
        })
    }

    fn frobenius_dot(&self, other: &GramMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    fn frobenius_norm(&self) -> f64 {
        self.frobenius_dot(self).sqrt()
    }
}

/// Tangent-kernel gram of `ids` (in the given order) at fixed weights.
pub fn ntk_gram<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    dataset: &Dataset,
    ids: &[u64],
) -> Result<GramMatrix, DynError> {
    if ids.is_empty() {
        return Err(DynError::Config("kernel needs at least one example".into()));
    }
    let probe = Exec::<T>::new(spec)?;
    probe.check_params(params)?;
    if dataset.input_dim() != spec.input_dim {
        return Err(DynError::Nn(NnError::Shape {
            what: "dataset feature dimension",
            expected: spec.input_dim,
            got: dataset.input_dim(),
        }));
    }
    let index_of: HashMap<u64, usize> = dataset
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut indices = Vec::with_capacity(ids.len());
    for &id in ids {
        match index_of.get(&id) {
            Some(&i) => indices.push(i),
            None => return Err(DynError::Data(DataError::UnknownId(id))),
        }
    }

    let classes = spec.classes;
    let dim = probe.param_len();
    let m = ids.len();
    // All Jacobian rows, example-major then logit-minor.
    let mut rows = vec![T::zero(); m * classes * dim];
    rows.par_chunks_mut(classes * dim)
        .zip(indices.par_iter())
        .for_each(|(out, &idx)| {
            let mut exec = Exec::<T>::new(spec).expect("spec validated above");
            exec.load_input(dataset.input(idx));
            exec.logits(params.as_slice());
            exec.jacobian_rows(params.as_slice(), out);
        });

    let n = m * classes;
    let mut data = vec![0.0f64; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let ri = &rows[i * dim..(i + 1) * dim];
        for (j, slot) in out.iter_mut().enumerate().skip(i) {
            let rj = &rows[j * dim..(j + 1) * dim];
            *slot = linalg::dot_f64(ri, rj);
        }
    });
    // Mirror the strict upper triangle.
    for i in 0..n {
        for j in 0..i {
            data[i * n + j] = data[j * n + i];
        }
    }
    Ok(GramMatrix {
        n,
        data,
        example_ids: ids.to_vec(),
        classes,
    })
}

/// One minus the Frobenius cosine similarity of two same-shape grams.
///
/// Zero when the kernel direction froze; scale changes alone do not move it.
pub fn kernel_velocity(a: &GramMatrix, b: &GramMatrix) -> Result<f64, DynError> {
    if a.n != b.n {
        return Err(DynError::Config(format!(
            "gram shapes differ: {} vs {}",
            a.n, b.n
        )));
    }
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(DynError::Config(
            "kernel velocity undefined for an all-zero gram".into(),
        ));
    }
    Ok(1.0 - a.frobenius_dot(b) / (na * nb))
}

/// Velocity of one score-rank bucket between one adjacent-epoch pair.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VelocityPoint {
    /// Earlier epoch of the pair (velocity is between `epoch` and `epoch+1`).
    pub epoch: usize,
    /// Rank of the bucket's hardest example (0 = highest score).
    pub bucket_start_rank: usize,
    pub velocity: f64,
}

/// Kernel velocity per score bucket between each adjacent-epoch checkpoint
/// pair in the trajectory.
///
/// Examples are ranked by descending `(score, id)` — consistent with
/// keep-top selection — and grouped into `bucket_size` buckets every
/// `bucket_stride` ranks (trailing partial buckets are dropped).
pub fn velocity_profile<T: Scalar>(
    checkpoints: &[Checkpoint],
    dataset: &Dataset,
    table: &ScoreTable,
    bucket_size: usize,
    bucket_stride: usize,
) -> Result<Vec<VelocityPoint>, DynError> {
    if bucket_size == 0 || bucket_stride == 0 {
        return Err(DynError::Config(
            "bucket size and stride must be positive".into(),
        ));
    }
    if checkpoints.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        return Err(DynError::Config(
            "checkpoints must have strictly increasing epochs".into(),
        ));
    }
    let pairs: Vec<usize> = checkpoints
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].epoch == w[0].epoch + 1)
        .map(|(i, _)| i)
        .collect();
    if pairs.is_empty() {
        return Err(DynError::Config(
            "no adjacent-epoch checkpoint pairs to compare".into(),
        ));
    }
    table.validate_against(dataset)?;

    // Descending (score, id): reverse of the ascending selection order.
    let mut order: Vec<(f64, u64)> = table.entries().iter().map(|&(id, s)| (s, id)).collect();
    order.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
    let n = order.len();
    let mut buckets = Vec::new();
    let mut start = 0usize;
    while start + bucket_size <= n {
        let ids: Vec<u64> = order[start..start + bucket_size]
            .iter()
            .map(|&(_, id)| id)
            .collect();
        buckets.push((start, ids));
        start += bucket_stride;
    }
    if buckets.is_empty() {
        return Err(DynError::Config(format!(
            "bucket size {} exceeds the {} scored examples",
            bucket_size, n
        )));
    }

    let mut points = Vec::new();
    for (start_rank, ids) in &buckets {
        // Compute each needed gram once per checkpoint, reusing shared ends
        // of back-to-back pairs.
        let mut grams: HashMap<usize, GramMatrix> = HashMap::new();
        for &pi in &pairs {
            for ci in [pi, pi + 1] {
                if !grams.contains_key(&ci) {
                    let c = &checkpoints[ci];
                    let params = c.params::<T>()?;
                    grams.insert(ci, ntk_gram::<T>(&c.spec, &params, dataset, ids)?);
                }
            }
            let v = kernel_velocity(&grams[&pi], &grams[&(pi + 1)])?;
            points.push(VelocityPoint {
                epoch: checkpoints[pi].epoch,
                bucket_start_rank: *start_rank,
                velocity: v,
            });
        }
    }
    // Rows grouped by epoch, then by bucket rank.
    points.sort_by_key(|p| (p.epoch, p.bucket_start_rank));
    Ok(points)
}

/// CSV form: `epoch,bucket_start_rank,velocity`.
pub fn write_velocity_csv(points: &[VelocityPoint], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,bucket_start_rank,velocity")?;
    for p in points {
        writeln!(w, "{},{},{}", p.epoch, p.bucket_start_rank, p.velocity)?;
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b`, elementwise.
pub fn interpolate<T: Scalar>(
    a: &ParamVector<T>,
    b: &ParamVector<T>,
    alpha: f64,
) -> Result<ParamVector<T>, DynError> {
    if a.len() != b.len() {
        return Err(DynError::Nn(NnError::Shape {
            what: "interpolation endpoints",
            expected: a.len(),
            got: b.len(),
        }));
    }
    let ca = T::from_f64(alpha);
    let cb = T::from_f64(1.0 - alpha);
    let mut out = a.clone();
    for (o, (&x, &y)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice().iter().zip(b.as_slice()))
    {
        *o = ca * x + cb * y;
    }
    Ok(out)
}

/// Which training metric the barrier is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BarrierMetric {
    /// 0-1 training error (the headline quantity).
    ZeroOne,
    /// Mean cross-entropy (convexity oracle for linear models).
    Loss,
}

/// The barrier height and the full profile along the segment.
#[derive(Clone, Debug)]
pub struct BarrierResult {
    /// Largest excess of `E(alpha)` over the endpoint interpolation.
    pub barrier: f64,
    pub peak_alpha: f64,
    /// `(alpha, E(alpha))` pairs, ascending alpha, endpoints included.
    pub profile: Vec<(f64, f64)>,
}

/// Evenly spaced alpha grid on [0, 1] (endpoints included).
pub fn alpha_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2, "an alpha grid needs both endpoints");
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect()
}

/// The fast three-point grid: endpoints plus the midpoint.
pub fn alpha_mid_only() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}

/// Barrier between two weight vectors along their linear segment.
///
/// `E(alpha)` is evaluated at `alpha*a + (1-alpha)*b` on `dataset`; the
/// barrier is `max_alpha E(alpha) - (alpha*E(a) + (1-alpha)*E(b))`. The
/// endpoints are always evaluated (they anchor the interpolation baseline
/// and pin the maximum at >= 0).
pub fn error_barrier<T: Scalar>(
    spec: &ModelSpec,
    a: &ParamVector<T>,
    b: &ParamVector<T>,
    dataset: &Dataset,
    alphas: &[f64],
    metric: BarrierMetric,
) -> Result<BarrierResult, DynError> {
    if alphas.iter().any(|&x| !(x.is_finite() && (0.0..=1.0).contains(&x))) {
        return Err(DynError::Config(
            "interpolation coefficients must lie in [0, 1]".into(),
        ));
    }
    let mut grid: Vec<f64> = alphas.to_vec();
    grid.extend_from_slice(&[0.0, 1.0]);
    grid.sort_by(|x, y| x.partial_cmp(y).expect("finite alphas"));
    grid.dedup();

    let measure = |params: &ParamVector<T>| -> Result<f64, DynError> {
        let eval = evaluate(params, spec, dataset)?;
        Ok(match metric {
            BarrierMetric::ZeroOne => 1.0 - eval.accuracy,
            BarrierMetric::Loss => eval.mean_loss,
        })
    };

    let mut profile = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let w = interpolate(a, b, alpha)?;
        profile.push((alpha, measure(&w)?));
    }
    let e_b = profile.first().expect("grid includes 0").1;
    let e_a = profile.last().expect("grid includes 1").1;
    let mut barrier = f64::NEG_INFINITY;
    let mut peak_alpha = 0.0;
    for &(alpha, e) in &profile {
        let excess = e - (alpha * e_a + (1.0 - alpha) * e_b);
        if excess > barrier {
            barrier = excess;
            peak_alpha = alpha;
        }
    }
    Ok(BarrierResult {
        barrier,
        peak_alpha,
        profile,
    })
}

/// Barrier between one spawned child pair.
#[derive(Clone, Debug, Serialize)]
pub struct SpawnBarrierPoint {
    pub spawn_epoch: usize,
    /// Label of the training subset the runs used (e.g. `full` or a
    /// selection description).
    pub subset_kind: String,
    pub pair_index: usize,
    pub barrier: f64,
}

/// Branch child pairs off one parent run and measure the 0-1 training-error
/// barrier between the endpoints of each pair.
///
/// The parent trains on `dataset` under `config`. At each spawn epoch
/// (ascending), `n_pairs` pairs of children fork with identical weights and
/// momentum but fresh data-order seeds
/// (`derive(base_seed, CHILD_ORDER, spawn_epoch << 32 | child_index)`), then
/// train to the end of the schedule.
pub fn spawn_barriers<T: Scalar>(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    spawn_epochs: &[usize],
    n_pairs: usize,
    alphas: &[f64],
    base_seed: u64,
    subset_kind: &str,
) -> Result<Vec<SpawnBarrierPoint>, DynError> {
    if spawn_epochs.is_empty() {
        return Err(DynError::Config("no spawn epochs requested".into()));
    }
    if n_pairs == 0 {
        return Err(DynError::Config("need at least one child pair".into()));
    }
    let mut order: Vec<usize> = spawn_epochs.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != spawn_epochs.len() {
        return Err(DynError::Config(
            "spawn epochs must be distinct".into(),
        ));
    }

    let mut parent = Engine::<T>::new(spec, dataset, config)?;
    let final_epoch = parent.final_epoch();
    if order.last().copied().unwrap_or(0) > final_epoch {
        return Err(DynError::Config(format!(
            "spawn epoch {} beyond the {}-epoch run",
            order.last().unwrap(),
            final_epoch
        )));
    }

    let mut points = Vec::with_capacity(order.len() * n_pairs);
    let mut sink = Vec::new();
    for &t in &order {
        parent.run_until_epoch(t, None, &mut sink)?;
        for p in 0..n_pairs {
            let run_child = |child_index: u64| -> Result<ParamVector<T>, DynError> {
                let seed = seeds::derive(
                    base_seed,
                    seeds::tag::CHILD_ORDER,
                    ((t as u64) << 32) | child_index,
                );
                let mut child = parent.fork(seed);
                child.run_until_epoch(final_epoch, None, &mut Vec::new())?;
                Ok(child.params().clone())
            };
            let wa = run_child(2 * p as u64)?;
            let wb = run_child(2 * p as u64 + 1)?;
            let result =
                error_barrier::<T>(spec, &wa, &wb, dataset, alphas, BarrierMetric::ZeroOne)?;
            points.push(SpawnBarrierPoint {
                spawn_epoch: t,
                subset_kind: subset_kind.to_string(),
                pair_index: p,
                barrier: result.barrier,
            });
        }
    }
    Ok(points)
}

/// CSV form: `spawn_epoch,subset_kind,pair_index,barrier`.
pub fn write_barrier_csv(points: &[SpawnBarrierPoint], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "spawn_epoch,subset_kind,pair_index,barrier")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{}",
            p.spawn_epoch, p.subset_kind, p.pair_index, p.barrier
        )?;
    }
    Ok(())
}
