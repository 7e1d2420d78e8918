//! Deterministic seeded SGD: momentum, weight decay, stepped LR schedule,
//! per-epoch checkpoints, per-presentation correctness logging, and test
//! evaluation.
//!
//! The full trajectory is a pure function of `(spec, dataset, config)`.
//! Per-example gradients inside a batch are computed in parallel over fixed
//! 32-example chunks and reduced in chunk order, so results are bit-identical
//! regardless of thread count. Epoch shuffles come from a dedicated RNG
//! stream per epoch, which is what makes checkpoint resume exact.
//!
//! Subset runs (pruned datasets) keep the optimizer step budget and the step
//! indices of LR decays of the full-size run by setting
//! [`TrainConfig::schedule_n`]; the final epoch is then cut short when the
//! budget is exhausted.
//!
//! # Checkpoint file layout
//!
//! All multi-byte values little-endian; the JSON header is UTF-8.
//!
//! ```text
//! offset 0: magic "DDCKPT\x001" (8 bytes)
//! u32: header byte length H
//! H bytes: JSON header {epoch, step, spec, config_digest,
//!                       data_order_seed, init_seed, param_len}
//! param_len * 4 bytes: weights, f32
//! param_len * 4 bytes: momentum buffer, f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{Exec, ModelSpec, NnError, ParamLayout, ParamVector};
use crate::scalar::Scalar;
use crate::seeds;

/// Fixed parallel-reduction chunk size (determinism contract; do not tune
/// per machine).
const GRAD_CHUNK: usize = 32;

/// Errors from configuration, divergence, and checkpoint IO.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: u64, what: &'static str },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint io error on {path}: {message}")]
    CheckpointIo { path: PathBuf, message: String },
    #[error("checkpoint does not match this run: {0}")]
    CheckpointMismatch(String),
}

/// Hyperparameters and seeds of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    /// L2 weight decay, added to the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// Epochs at which the learning rate divides by the decay factor;
    /// strictly increasing, all `< epochs`.
    pub lr_decay_epochs: Vec<usize>,
    pub data_order_seed: u64,
    pub init_seed: u64,
    /// Epochs whose post-epoch state is checkpointed (0 = initialization).
    pub score_epochs: Vec<usize>,
    /// When set, the step budget and LR decay boundaries are computed as if
    /// the dataset had this many examples (subset-retraining contract).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_n: Option<usize>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: a 5x compression of a 200-epoch/{60,120,160}
    /// schedule, preserving phase proportions.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 40,
            lr_decay_factor: 5.0,
            lr_decay_epochs: vec![24, 32],
            data_order_seed: 0,
            init_seed: 0,
            score_epochs: vec![0, 1, 2, 4, 8],
            schedule_n: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // A zero learning rate is a legitimate frozen-dynamics probe (the
        // trajectory stays at initialization), so only negative rates are
        // rejected.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(
                "learning rate must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epoch count must be positive".into()));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(TrainError::Config("LR decay factor must be positive".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config(
                "LR decay epochs must be strictly increasing".into(),
            ));
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(TrainError::Config(
                "LR decay epochs must be below the epoch count".into(),
            ));
        }
        if self.schedule_n == Some(0) {
            return Err(TrainError::Config("schedule_n must be positive".into()));
        }
        Ok(())
    }

    /// Digest over everything that determines a trajectory (spec + config).
    pub fn digest(&self, spec: &ModelSpec) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        h.update(serde_json::to_vec(self).expect("config serializes"));
        let out = h.finalize();
        let mut s = String::with_capacity(16);
        for b in &out[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Learning rate in force during `epoch` (schedule-epoch space).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config
        .lr_decay_epochs
        .iter()
        .filter(|&&d| d <= epoch)
        .count();
    config.learning_rate / config.lr_decay_factor.powi(decays as i32)
}

/// Model weights plus optimizer state at an epoch boundary.
///
/// Weights and the momentum buffer are stored in `f32` (the storage
/// precision) regardless of the working precision — exact resume is
/// guaranteed in 32-bit mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub spec: ModelSpec,
    pub config_digest: String,
    pub data_order_seed: u64,
    pub init_seed: u64,
    pub weights: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Checkpoint {
    /// Weights as a typed parameter vector in the working precision.
    pub fn params<T: Scalar>(&self) -> Result<ParamVector<T>, NnError> {
        let layout = std::sync::Arc::new(ParamLayout::for_spec(&self.spec)?);
        ParamVector::from_data(layout, self.weights.iter().map(|&w| T::from_f32(w)).collect())
    }
}

/// Ordered list of checkpoints captured during one run.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
}

impl Trajectory {
    pub fn at_epoch(&self, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }
}

/// Per-presentation correctness, one ordered event list per example.
///
/// An event records the optimizer step of the minibatch the example appeared
/// in and whether the pre-update forward pass classified it correctly.
#[derive(Clone, Debug, Default)]
pub struct PresentationLog {
    ids: Vec<u64>,
    events: Vec<Vec<(u64, bool)>>,
    epochs_logged: usize,
    steps_per_epoch: u64,
}

impl PresentationLog {
    fn new(ids: &[u64], steps_per_epoch: u64) -> Self {
        PresentationLog {
            ids: ids.to_vec(),
            events: vec![Vec::new(); ids.len()],
            epochs_logged: 0,
            steps_per_epoch,
        }
    }

    /// Test helper: assemble a log directly from explicit event lists.
    #[cfg(test)]
    pub(crate) fn from_events_for_tests(
        ids: Vec<u64>,
        events: Vec<Vec<(u64, bool)>>,
        epochs_logged: usize,
        steps_per_epoch: u64,
    ) -> Self {
        assert_eq!(ids.len(), events.len());
        PresentationLog {
            ids,
            events,
            epochs_logged,
            steps_per_epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Events of the example at dataset index `idx`, in presentation order.
    pub fn events(&self, idx: usize) -> &[(u64, bool)] {
        &self.events[idx]
    }

    /// Number of completed epochs the log covers.
    pub fn epochs_logged(&self) -> usize {
        self.epochs_logged
    }

    /// True when every example has exactly one event per completed epoch.
    /// Holds for full-budget runs; budget-truncated final epochs (subset
    /// retrains) leave a partial tail instead.
    pub fn is_complete(&self) -> bool {
        !self.is_empty()
            && self.epochs_logged > 0
            && self
                .events
                .iter()
                .all(|ev| ev.len() == self.epochs_logged)
    }

    /// CSV interchange form: `example_id,epoch,correct`, ordered by id then
    /// presentation. The epoch column counts this run's own epochs.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "example_id,epoch,correct")?;
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        for i in order {
            for &(step, correct) in &self.events[i] {
                writeln!(
                    w,
                    "{},{},{}",
                    self.ids[i],
                    step / self.steps_per_epoch,
                    correct as u8
                )?;
            }
        }
        Ok(())
    }
}

/// Training-time metrics for one epoch of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean pre-update cross-entropy over the epoch's presentations.
    pub train_loss: f64,
    /// Fraction of pre-update presentations classified correctly.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub trajectory: Trajectory,
    pub log: PresentationLog,
    pub metrics: Vec<EpochMetrics>,
}

/// Accuracy, mean loss, and per-example misclassification flags.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `errors[i]` is true when example `i` is misclassified (0-1 error).
    pub errors: Vec<bool>,
}

/// Evaluate 0-1 error and mean cross-entropy of fixed weights on a dataset.
pub fn evaluate<T: Scalar>(
    params: &ParamVector<T>,
    spec: &ModelSpec,
    dataset: &Dataset,
) -> Result<EvalResult, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Config("cannot evaluate on an empty dataset".into()));
    }
    if dataset.input_dim() != spec.input_dim {
        return Err(TrainError::Nn(NnError::Shape {
            what: "dataset feature dimension",
            expected: spec.input_dim,
            got: dataset.input_dim(),
        }));
    }
    let mut exec = Exec::<T>::new(spec)?;
    exec.check_params(params)?;
    let mut errors = vec![false; dataset.len()];
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        exec.load_input(dataset.input(i));
        let logits = exec.logits(params.as_slice());
        let pred = crate::nn::argmax(logits);
        let probs = exec.probs();
        let loss = crate::nn::cross_entropy(probs, dataset.label(i));
        loss_sum += loss.as_f64();
        if pred == dataset.label(i) {
            correct += 1;
        } else {
            errors[i] = true;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / dataset.len() as f64,
        mean_loss: loss_sum / dataset.len() as f64,
        errors,
    })
}

/// One SGD update from an explicit batch: mean cross-entropy gradient plus
/// weight decay, then the Nesterov step. Exposed for direct unit testing;
/// training runs drive the same kernel through [`Engine`].
pub fn sgd_step<T: Scalar>(
    spec: &ModelSpec,
    dataset: &Dataset,
    batch: &[usize],
    params: &mut ParamVector<T>,
    velocity: &mut [T],
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("batch must be non-empty".into()));
    }
    let mut exec = Exec::<T>::new(spec)?;
    exec.check_params(params)?;
    let mut grad = vec![T::zero(); params.len()];
    for &i in batch {
        exec.load_input(dataset.input(i));
        exec.grad_accumulate(params.as_slice(), dataset.label(i), &mut grad);
    }
    let scale = T::from_f64(1.0 / batch.len() as f64);
    for g in grad.iter_mut() {
        *g *= scale;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Diverged {
            step: 0,
            what: "gradient",
        });
    }
    apply_update(
        params.as_mut_slice(),
        velocity,
        &grad,
        T::from_f64(lr),
        T::from_f64(config.momentum),
        T::from_f64(config.weight_decay),
    );
    Ok(())
}

/// Nesterov momentum with L2 decay folded into the gradient:
/// `g = grad + wd*w; buf = mu*buf + g; w -= lr*(g + mu*buf)`.
fn apply_update<T: Scalar>(w: &mut [T], buf: &mut [T], grad: &[T], lr: T, mu: T, wd: T) {
    for i in 0..w.len() {
        let g = grad[i] + wd * w[i];
        buf[i] = mu * buf[i] + g;
        let eff = g + mu * buf[i];
        w[i] -= lr * eff;
    }
}

/// Per-chunk scratch for the parallel batch gradient.
struct ChunkSlot<T> {
    exec: Exec<T>,
    grad: Vec<T>,
    /// (dataset index, correct, loss) per example, presentation order.
    records: Vec<(u32, bool, f64)>,
}

/// Live training run. Owns weights, optimizer state, and step bookkeeping;
/// borrows the dataset.
pub struct Engine<'a, T: Scalar> {
    spec: ModelSpec,
    config: TrainConfig,
    dataset: &'a Dataset,
    params: ParamVector<T>,
    velocity: Vec<T>,
    step: u64,
    epoch: usize,
    /// Own-data steps per epoch (ceil(N / M); every example seen each epoch).
    steps_per_epoch: u64,
    /// Total optimizer step budget, in schedule space.
    total_steps: u64,
    /// Step indices at which the learning rate divides by the decay factor.
    decay_steps: Vec<u64>,
    slots: Vec<ChunkSlot<T>>,
    log: PresentationLog,
    config_digest: String,
    order_seed: u64,
}

impl<'a, T: Scalar> Engine<'a, T> {
    /// Fresh run: seeded initialization at epoch 0, step 0.
    ///
    /// The config's `init_seed` is authoritative; it is written into the
    /// spec copy that checkpoints carry.
    pub fn new(
        spec: &ModelSpec,
        dataset: &'a Dataset,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let mut spec = spec.clone();
        spec.init_seed = config.init_seed;
        let params = crate::nn::init_params::<T>(&spec)?;
        Self::with_state(spec, dataset, config.clone(), params, None, 0, 0)
    }

    /// Resume from a checkpoint. The config must describe the same run.
    pub fn from_checkpoint(
        checkpoint: &Checkpoint,
        dataset: &'a Dataset,
        config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let digest = config.digest(&checkpoint.spec);
        if digest != checkpoint.config_digest {
            return Err(TrainError::CheckpointMismatch(format!(
                "config digest {} vs checkpoint {}",
                digest, checkpoint.config_digest
            )));
        }
        let params = checkpoint.params::<T>()?;
        let velocity: Vec<T> = checkpoint.velocity.iter().map(|&v| T::from_f32(v)).collect();
        Self::with_state(
            checkpoint.spec.clone(),
            dataset,
            config.clone(),
            params,
            Some(velocity),
            checkpoint.epoch,
            checkpoint.step,
        )
    }

    fn with_state(
        spec: ModelSpec,
        dataset: &'a Dataset,
        config: TrainConfig,
        params: ParamVector<T>,
        velocity: Option<Vec<T>>,
        epoch: usize,
        step: u64,
    ) -> Result<Self, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::Config("cannot train on an empty dataset".into()));
        }
        if dataset.input_dim() != spec.input_dim {
            return Err(TrainError::Nn(NnError::Shape {
                what: "dataset feature dimension",
                expected: spec.input_dim,
                got: dataset.input_dim(),
            }));
        }
        if dataset.classes() > spec.classes {
            return Err(TrainError::Config(format!(
                "dataset has {} classes but the model outputs {}",
                dataset.classes(),
                spec.classes
            )));
        }
        if config.batch_size > dataset.len() {
            return Err(TrainError::Config(format!(
                "batch size {} exceeds dataset size {}",
                config.batch_size,
                dataset.len()
            )));
        }
        let m = config.batch_size as u64;
        let n_own = dataset.len() as u64;
        let n_schedule = config.schedule_n.map(|n| n as u64).unwrap_or(n_own);
        if n_schedule < n_own {
            return Err(TrainError::Config(format!(
                "schedule_n {} below dataset size {}",
                n_schedule,
                dataset.len()
            )));
        }
        let steps_per_epoch = n_own.div_ceil(m);
        let schedule_spe = n_schedule.div_ceil(m);
        let total_steps = schedule_spe * config.epochs as u64;
        let decay_steps = config
            .lr_decay_epochs
            .iter()
            .map(|&e| e as u64 * schedule_spe)
            .collect();
        let n_slots = (config.batch_size).div_ceil(GRAD_CHUNK);
        let mut slots = Vec::with_capacity(n_slots);
        for _ in 0..n_slots {
            slots.push(ChunkSlot {
                exec: Exec::<T>::new(&spec)?,
                grad: vec![T::zero(); params.len()],
                records: Vec::with_capacity(GRAD_CHUNK),
            });
        }
        let velocity = velocity.unwrap_or_else(|| vec![T::zero(); params.len()]);
        if velocity.len() != params.len() {
            return Err(TrainError::CheckpointMismatch(
                "momentum buffer length differs from weight count".into(),
            ));
        }
        let config_digest = config.digest(&spec);
        let order_seed = config.data_order_seed;
        Ok(Engine {
            spec,
            dataset,
            params,
            velocity,
            step,
            epoch,
            steps_per_epoch,
            total_steps,
            decay_steps,
            slots,
            log: PresentationLog::new(dataset.ids(), steps_per_epoch),
            config_digest,
            order_seed,
            config,
        })
    }

    /// Branch an identical continuation that differs only in minibatch
    /// order. Weights, momentum buffer, and step bookkeeping carry over
    /// bit-exactly; the presentation log starts fresh.
    pub fn fork(&self, new_order_seed: u64) -> Engine<'a, T> {
        let mut config = self.config.clone();
        config.data_order_seed = new_order_seed;
        let mut child = Engine::with_state(
            self.spec.clone(),
            self.dataset,
            config,
            self.params.clone(),
            Some(self.velocity.clone()),
            self.epoch,
            self.step,
        )
        .expect("parent state is valid");
        // The fork is the same logical experiment; keep the parent's digest
        // so its checkpoints stay traceable to the parent config.
        child.config_digest = self.config_digest.clone();
        child
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// Own-data epochs this run will execute (budget-limited).
    pub fn final_epoch(&self) -> usize {
        self.total_steps.div_ceil(self.steps_per_epoch) as usize
    }

    pub fn params(&self) -> &ParamVector<T> {
        &self.params
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn log(&self) -> &PresentationLog {
        &self.log
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    /// Learning rate in force at optimizer step `step`.
    fn lr_at_step(&self, step: u64) -> f64 {
        let decays = self.decay_steps.iter().filter(|&&d| d <= step).count();
        self.config.learning_rate / self.config.lr_decay_factor.powi(decays as i32)
    }

    /// Snapshot of the current epoch-boundary state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            step: self.step,
            spec: self.spec.clone(),
            config_digest: self.config_digest.clone(),
            data_order_seed: self.config.data_order_seed,
            init_seed: self.config.init_seed,
            weights: self.params.as_slice().iter().map(|&w| w.as_f32()).collect(),
            velocity: self.velocity.iter().map(|&v| v.as_f32()).collect(),
        }
    }

    /// Run one epoch (or the budget-truncated remainder of the final one).
    /// Returns its metrics, or `None` when the budget is already exhausted.
    pub fn run_epoch(
        &mut self,
        test: Option<&Dataset>,
    ) -> Result<Option<EpochMetrics>, TrainError> {
        if self.step >= self.total_steps {
            return Ok(None);
        }
        let epoch_lr = self.lr_at_step(self.step);
        let n = self.dataset.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        // Fresh uniform shuffle per epoch: one RNG stream per epoch index so
        // resuming at an epoch boundary replays the identical order.
        let mut rng = seeds::rng_stream(self.order_seed, self.epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut presented = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            if self.step >= self.total_steps {
                break;
            }
            let lr = self.lr_at_step(self.step);
            self.run_batch(batch, lr, &mut loss_sum, &mut correct)?;
            presented += batch.len();
            self.step += 1;
        }
        self.epoch += 1;
        if presented == n {
            self.log.epochs_logged += 1;
        }
        let test_acc = match test {
            Some(ds) => Some(evaluate(&self.params, &self.spec, ds)?.accuracy),
            None => None,
        };
        Ok(Some(EpochMetrics {
            epoch: self.epoch - 1,
            train_loss: loss_sum / presented.max(1) as f64,
            train_acc: correct as f64 / presented.max(1) as f64,
            test_acc,
            lr: epoch_lr,
        }))
    }

    fn run_batch(
        &mut self,
        batch: &[u32],
        lr: f64,
        loss_sum: &mut f64,
        correct: &mut usize,
    ) -> Result<(), TrainError> {
        use rayon::prelude::*;
        let chunks: Vec<&[u32]> = batch.chunks(GRAD_CHUNK).collect();
        let dataset = self.dataset;
        let params = self.params.as_slice();
        self.slots[..chunks.len()]
            .par_iter_mut()
            .zip(chunks.par_iter())
            .for_each(|(slot, chunk)| {
                slot.grad.iter_mut().for_each(|g| *g = T::zero());
                slot.records.clear();
                for &idx in chunk.iter() {
                    let i = idx as usize;
                    slot.exec.load_input(dataset.input(i));
                    let loss =
                        slot.exec
                            .grad_accumulate(params, dataset.label(i), &mut slot.grad);
                    let pred_ok = slot.exec.last_prediction() == dataset.label(i);
                    slot.records.push((idx, pred_ok, loss.as_f64()));
                }
            });

        // Deterministic reduction: chunk order, then element order.
        let (acc_slot, rest) = self.slots.split_first_mut().expect("at least one slot");
        for slot in rest[..chunks.len() - 1].iter() {
            for (a, &g) in acc_slot.grad.iter_mut().zip(&slot.grad) {
                *a += g;
            }
        }
        let scale = T::from_f64(1.0 / batch.len() as f64);
        acc_slot.grad.iter_mut().for_each(|g| *g *= scale);
        if acc_slot.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged {
                step: self.step,
                what: "gradient",
            });
        }

        apply_update(
            self.params.as_mut_slice(),
            &mut self.velocity,
            &acc_slot.grad,
            T::from_f64(lr),
            T::from_f64(self.config.momentum),
            T::from_f64(self.config.weight_decay),
        );

        for slot in self.slots[..chunks.len()].iter() {
            for &(idx, ok, loss) in &slot.records {
                self.log.events[idx as usize].push((self.step, ok));
                *loss_sum += loss;
                *correct += ok as usize;
            }
        }
        Ok(())
    }

    /// Advance to the end of own-data epoch `target` (no-op if already past).
    pub fn run_until_epoch(
        &mut self,
        target: usize,
        test: Option<&Dataset>,
        metrics: &mut Vec<EpochMetrics>,
    ) -> Result<(), TrainError> {
        while self.epoch < target {
            match self.run_epoch(test)? {
                Some(m) => metrics.push(m),
                None => break,
            }
        }
        Ok(())
    }

    /// Consume the engine, returning the presentation log.
    pub fn into_log(self) -> PresentationLog {
        self.log
    }
}

/// Train to the full step budget, checkpointing at the configured score
/// epochs (0 = initialization) and at the end.
pub fn train<T: Scalar>(
    spec: &ModelSpec,
    dataset: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let mut engine = Engine::<T>::new(spec, dataset, config)?;
    let final_epoch = engine.final_epoch();
    let mut capture: Vec<usize> = config
        .score_epochs
        .iter()
        .copied()
        .filter(|&e| e < final_epoch)
        .chain(std::iter::once(final_epoch))
        .collect();
    capture.sort_unstable();
    capture.dedup();

    let mut trajectory = Trajectory::default();
    let mut metrics = Vec::with_capacity(final_epoch);
    for &target in &capture {
        engine.run_until_epoch(target, test, &mut metrics)?;
        trajectory.checkpoints.push(engine.checkpoint());
    }
    Ok(TrainOutput {
        trajectory,
        log: engine.into_log(),
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint file IO
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DDCKPT\x001";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    epoch: usize,
    step: u64,
    spec: ModelSpec,
    config_digest: String,
    data_order_seed: u64,
    init_seed: u64,
    param_len: usize,
}

fn ckpt_io_err(path: &Path, message: impl std::fmt::Display) -> TrainError {
    TrainError::CheckpointIo {
        path: path.to_owned(),
        message: message.to_string(),
    }
}

/// Write a checkpoint to disk (layout in the module docs).
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let header = CheckpointHeader {
        epoch: checkpoint.epoch,
        step: checkpoint.step,
        spec: checkpoint.spec.clone(),
        config_digest: checkpoint.config_digest.clone(),
        data_order_seed: checkpoint.data_order_seed,
        init_seed: checkpoint.init_seed,
        param_len: checkpoint.weights.len(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| ckpt_io_err(path, e))?;
    let file = File::create(path).map_err(|e| ckpt_io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for v in &checkpoint.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &checkpoint.velocity {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })()
    .map_err(|e| ckpt_io_err(path, e))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let file = File::open(path).map_err(|e| ckpt_io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| ckpt_io_err(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(ckpt_io_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| ckpt_io_err(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| ckpt_io_err(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| ckpt_io_err(path, e))?;
    let expect = ParamLayout::for_spec(&header.spec)
        .map_err(|e| ckpt_io_err(path, e))?
        .total();
    if header.param_len != expect {
        return Err(ckpt_io_err(
            path,
            format!("header says {} weights, spec needs {}", header.param_len, expect),
        ));
    }
    let mut read_block = |what: &str| -> Result<Vec<f32>, TrainError> {
        let mut raw = vec![0u8; header.param_len * 4];
        r.read_exact(&mut raw)
            .map_err(|e| ckpt_io_err(path, format!("{what}: {e}")))?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let weights = read_block("weight block")?;
    let velocity = read_block("momentum block")?;
    Ok(Checkpoint {
        epoch: header.epoch,
        step: header.step,
        spec: header.spec,
        config_digest: header.config_digest,
        data_order_seed: header.data_order_seed,
        init_seed: header.init_seed,
        weights,
        velocity,
    })
}
