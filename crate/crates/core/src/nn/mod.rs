//! Model specification, parameter storage, and exact per-example calculus.
//!
//! Two small architectures are supported: a fully connected ReLU network
//! (`Mlp`) described by its complete layer-size chain, and a fixed
//! conv-pool-dense stack (`SmallConv`). All parameters of a model live in one
//! flat vector with a published layout, which makes gradients, logit
//! Jacobians, and parameter interpolation plain vector arithmetic.
//!
//! Everything here is deterministic: initialization is driven by a seed
//! stored in the spec, and forward/backward are pure functions of
//! `(spec, params, input)`.

mod network;

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub(crate) use network::{backward_pass, forward_pass, Network, Workspace};

/// Probabilities are clamped to at least this value inside the log loss.
pub const LOG_EPS: f64 = 1e-12;

/// Errors from model construction and shape checking.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("{what}: expected length {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Supported architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    SmallConv,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchKind::Mlp => write!(f, "mlp"),
            ArchKind::SmallConv => write!(f, "small_conv"),
        }
    }
}

/// Spatial shape of image inputs, stored channel-major (`[c][y][x]` flattened).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Complete description of a model: architecture, sizes, and init seed.
///
/// For `Mlp`, `widths` is the full layer-size chain including the input
/// dimension and the class count, e.g. `[784, 128, 128, 10]`; `[d, k]` is the
/// linear softmax model. For `SmallConv`, `widths` is
/// `[conv_channels, hidden_units, classes]` and `image` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub widths: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub init_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageShape>,
}

impl Default for ModelSpec {
    /// The desk model: an MLP with two 128-unit hidden layers.
    fn default() -> Self {
        ModelSpec::mlp(vec![36, 128, 128, 10], 0)
    }
}

impl ModelSpec {
    /// Fully connected ReLU network from its complete layer-size chain.
    pub fn mlp(widths: Vec<usize>, init_seed: u64) -> Self {
        let input_dim = widths.first().copied().unwrap_or(0);
        let classes = widths.last().copied().unwrap_or(0);
        ModelSpec {
            arch: ArchKind::Mlp,
            widths,
            input_dim,
            classes,
            init_seed,
            image: None,
        }
    }

    /// conv3x3 -> relu -> meanpool2 -> dense -> relu -> dense stack.
    pub fn small_conv(
        image: ImageShape,
        conv_channels: usize,
        hidden: usize,
        classes: usize,
        init_seed: u64,
    ) -> Self {
        ModelSpec {
            arch: ArchKind::SmallConv,
            widths: vec![conv_channels, hidden, classes],
            input_dim: image.len(),
            classes,
            init_seed,
            image: Some(image),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::Spec("input_dim must be positive".into()));
        }
        if self.classes < 2 {
            return Err(NnError::Spec("need at least two classes".into()));
        }
        match self.arch {
            ArchKind::Mlp => {
                if self.widths.len() < 2 {
                    return Err(NnError::Spec(
                        "mlp widths must list at least input and output sizes".into(),
                    ));
                }
                if self.widths[0] != self.input_dim {
                    return Err(NnError::Spec(format!(
                        "widths start with {} but input_dim is {}",
                        self.widths[0], self.input_dim
                    )));
                }
                if *self.widths.last().unwrap() != self.classes {
                    return Err(NnError::Spec(format!(
                        "widths end with {} but classes is {}",
                        self.widths.last().unwrap(),
                        self.classes
                    )));
                }
                if self.widths.iter().any(|&w| w == 0) {
                    return Err(NnError::Spec("zero-width layer".into()));
                }
                if let Some(img) = &self.image {
                    if img.len() != self.input_dim {
                        return Err(NnError::Spec(format!(
                            "image shape {}x{}x{} does not match input_dim {}",
                            img.height, img.width, img.channels, self.input_dim
                        )));
                    }
                }
            }
            ArchKind::SmallConv => {
                let img = self.image.as_ref().ok_or_else(|| {
                    NnError::Spec("small_conv requires an image shape".into())
                })?;
                if img.height < 4 || img.width < 4 || img.channels == 0 {
                    return Err(NnError::Spec(format!(
                        "image {}x{}x{} too small for conv3x3 + meanpool2",
                        img.height, img.width, img.channels
                    )));
                }
                if img.len() != self.input_dim {
                    return Err(NnError::Spec(format!(
                        "image shape {}x{}x{} does not match input_dim {}",
                        img.height, img.width, img.channels, self.input_dim
                    )));
                }
                if self.widths.len() != 3 {
                    return Err(NnError::Spec(
                        "small_conv widths must be [conv_channels, hidden, classes]".into(),
                    ));
                }
                if self.widths[0] == 0 || self.widths[1] == 0 {
                    return Err(NnError::Spec("zero-width layer".into()));
                }
                if self.widths[2] != self.classes {
                    return Err(NnError::Spec(format!(
                        "widths end with {} but classes is {}",
                        self.widths[2], self.classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(ParamLayout::for_spec(self)?.total())
    }
}

/// One named contiguous block in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    /// Row-major shape; for weights the leading axis is the output dimension.
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fan-in used for scaled initialization (product of non-output axes).
    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Ordered table of the named blocks making up a parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn for_spec(spec: &ModelSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry {
                name,
                offset: *offset,
                shape,
            });
            *offset += len;
        };
        match spec.arch {
            ArchKind::Mlp => {
                for i in 0..spec.widths.len() - 1 {
                    let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
                    push(format!("layer{i}.weight"), vec![fan_out, fan_in], &mut offset);
                    push(format!("layer{i}.bias"), vec![fan_out], &mut offset);
                }
            }
            ArchKind::SmallConv => {
                let img = spec.image.as_ref().expect("validated");
                let (ch, hidden, k) = (spec.widths[0], spec.widths[1], spec.widths[2]);
                let (pool_h, pool_w) = ((img.height - 2) / 2, (img.width - 2) / 2);
                let flat = ch * pool_h * pool_w;
                push(
                    "layer0.weight".into(),
                    vec![ch, img.channels, 3, 3],
                    &mut offset,
                );
                push("layer0.bias".into(), vec![ch], &mut offset);
                push("layer1.weight".into(), vec![hidden, flat], &mut offset);
                push("layer1.bias".into(), vec![hidden], &mut offset);
                push("layer2.weight".into(), vec![k, hidden], &mut offset);
                push("layer2.bias".into(), vec![k], &mut offset);
            }
        }
        Ok(ParamLayout {
            entries,
            total: offset,
        })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Flat parameter vector plus the layout describing its blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    data: Vec<T>,
    layout: Arc<ParamLayout>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::zero(); layout.total()];
        ParamVector { data, layout }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != layout.total() {
            return Err(NnError::Shape {
                what: "parameter vector",
                expected: layout.total(),
                got: data.len(),
            });
        }
        Ok(ParamVector { data, layout })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// View of one named block, e.g. `"layer0.weight"`.
    pub fn block(&self, name: &str) -> Option<&[T]> {
        let e = self.layout.entries.iter().find(|e| e.name == name)?;
        Some(&self.data[e.offset..e.offset + e.len()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let e = self.layout.entries.iter().find(|e| e.name == name)?;
        Some(&mut self.data[e.offset..e.offset + e.len()])
    }

    /// Convert between working precisions (`f32` <-> `f64`).
    pub fn convert<U: Scalar>(&self) -> ParamVector<U> {
        ParamVector {
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Row-major `classes x params` matrix of per-logit parameter gradients.
#[derive(Clone, Debug)]
pub struct LogitJacobian<T> {
    data: Vec<T>,
    classes: usize,
    dim: usize,
}

impl<T: Scalar> LogitJacobian<T> {
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Parameter-space dimension (columns).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gradient of logit `k` with respect to every parameter.
    pub fn row(&self, k: usize) -> &[T] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// He-scaled (normal, std `sqrt(2 / fan_in)`) weights and zero biases, seeded
/// by `spec.init_seed`. Samples are drawn in `f64` and cast to the working
/// precision so both precisions see the same underlying draw sequence.
pub fn init_params<T: Scalar>(spec: &ModelSpec) -> Result<ParamVector<T>, NnError> {
    let layout = Arc::new(ParamLayout::for_spec(spec)?);
    let mut params = ParamVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    for entry in layout.entries() {
        if !entry.name.ends_with(".weight") {
            continue; // biases start at zero
        }
        let std = (2.0 / entry.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let block = &mut params.as_mut_slice()[entry.offset..entry.offset + entry.len()];
        for w in block {
            *w = T::from_f64(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

/// Logits for one input vector.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    x: &[T],
) -> Result<Vec<T>, NnError> {
    let mut exec = Exec::new(spec)?;
    exec.check_params(params)?;
    check_input(spec, x.len())?;
    exec.load_input_t(x);
    Ok(exec.logits(params.as_slice()).to_vec())
}

/// Numerically safe softmax (max-shifted before exponentiation).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    if v.is_empty() {
        return;
    }
    let mut max = v[0];
    for &z in v.iter() {
        if z > max {
            max = z;
        }
    }
    let mut sum = T::zero();
    for z in v.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in v.iter_mut() {
        *z /= sum;
    }
}

/// `-ln p[label]`, with the probability clamped to at least [`LOG_EPS`].
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> T {
    let eps = T::from_f64(LOG_EPS);
    let p = if probs[label] > eps { probs[label] } else { eps };
    -p.ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient of the cross-entropy loss at one example with respect to every
/// parameter (no regularization term).
pub fn example_gradient<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    x: &[T],
    label: usize,
) -> Result<ParamVector<T>, NnError> {
    let mut exec = Exec::new(spec)?;
    exec.check_params(params)?;
    check_input(spec, x.len())?;
    check_label(spec, label)?;
    let mut grad = ParamVector::zeros(params.layout().clone());
    exec.load_input_t(x);
    exec.grad_accumulate(params.as_slice(), label, grad.as_mut_slice());
    Ok(grad)
}

/// Per-logit parameter gradients at one input, one row per class.
pub fn logit_jacobian<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamVector<T>,
    x: &[T],
) -> Result<LogitJacobian<T>, NnError> {
    let mut exec = Exec::new(spec)?;
    exec.check_params(params)?;
    check_input(spec, x.len())?;
    let dim = params.len();
    let mut data = vec![T::zero(); spec.classes * dim];
    exec.load_input_t(x);
    exec.logits(params.as_slice());
    exec.jacobian_rows(params.as_slice(), &mut data);
    Ok(LogitJacobian {
        data,
        classes: spec.classes,
        dim,
    })
}

fn check_input(spec: &ModelSpec, got: usize) -> Result<(), NnError> {
    if got != spec.input_dim {
        return Err(NnError::Shape {
            what: "input vector",
            expected: spec.input_dim,
            got,
        });
    }
    Ok(())
}

fn check_label(spec: &ModelSpec, label: usize) -> Result<(), NnError> {
    if label >= spec.classes {
        return Err(NnError::Shape {
            what: "class label",
            expected: spec.classes,
            got: label,
        });
    }
    Ok(())
}

/// Reusable execution context: compiled plan plus scratch buffers.
///
/// The hot paths (training, scoring, kernel rows) go through this to avoid
/// reallocating activations per example. Forward state persists, so after one
/// [`Exec::logits`] call the backward-based methods can run repeatedly.
pub(crate) struct Exec<T> {
    net: Network,
    ws: Workspace<T>,
    probs: Vec<T>,
    classes: usize,
}

impl<T: Scalar> Exec<T> {
    pub fn new(spec: &ModelSpec) -> Result<Self, NnError> {
        let net = Network::compile(spec)?;
        let ws = Workspace::new(&net);
        Ok(Exec {
            ws,
            probs: vec![T::zero(); spec.classes],
            classes: spec.classes,
            net,
        })
    }

    pub fn check_params(&self, params: &ParamVector<T>) -> Result<(), NnError> {
        if params.len() != self.net.param_len {
            return Err(NnError::Shape {
                what: "parameter vector",
                expected: self.net.param_len,
                got: params.len(),
            });
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.net.param_len
    }

    /// Copy an `f32` input (dataset storage precision) into the input stage.
    pub fn load_input(&mut self, x: &[f32]) {
        let stage = &mut self.ws.acts[0];
        debug_assert_eq!(stage.len(), x.len());
        for (dst, &src) in stage.iter_mut().zip(x) {
            *dst = T::from_f32(src);
        }
    }

    /// Copy a working-precision input into the input stage.
    pub fn load_input_t(&mut self, x: &[T]) {
        self.ws.acts[0].copy_from_slice(x);
    }

    /// Run the forward pass on the loaded input; returns the logits.
    pub fn logits(&mut self, params: &[T]) -> &[T] {
        forward_pass(&self.net, params, &mut self.ws);
        self.ws.acts.last().expect("at least one stage")
    }

    /// Softmax of the current logits (after [`Exec::logits`]).
    pub fn probs(&mut self) -> &[T] {
        let logits = self.ws.acts.last().expect("at least one stage");
        self.probs.copy_from_slice(logits);
        softmax_in_place(&mut self.probs);
        &self.probs
    }

    /// Predicted class of the most recent forward pass (after
    /// [`Exec::probs`] or [`Exec::grad_accumulate`]); ties break low.
    pub fn last_prediction(&self) -> usize {
        argmax(&self.probs)
    }

    /// Forward + softmax + backward for one example; accumulates the
    /// cross-entropy gradient into `grad` and returns the loss.
    ///
    /// Expects the input already loaded; leaves probabilities in `self.probs`.
    pub fn grad_accumulate(&mut self, params: &[T], label: usize, grad: &mut [T]) -> T {
        self.logits(params);
        self.probs();
        let loss = cross_entropy(&self.probs, label);
        let delta = self.ws.deltas.last_mut().expect("at least one stage");
        delta.copy_from_slice(&self.probs);
        delta[label] -= T::one();
        backward_pass(&self.net, params, &mut self.ws, grad);
        loss
    }

    /// Backward pass per logit with unit cotangents, writing `classes`
    /// consecutive rows of length `param_len` into `out`.
    ///
    /// Requires a prior [`Exec::logits`] call on the same input/params.
    pub fn jacobian_rows(&mut self, params: &[T], out: &mut [T]) {
        let dim = self.net.param_len;
        debug_assert_eq!(out.len(), self.classes * dim);
        for k in 0..self.classes {
            let delta = self.ws.deltas.last_mut().expect("at least one stage");
            delta.iter_mut().for_each(|v| *v = T::zero());
            delta[k] = T::one();
            let row = &mut out[k * dim..(k + 1) * dim];
            row.iter_mut().for_each(|v| *v = T::zero());
            backward_pass(&self.net, params, &mut self.ws, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn linear_model_param_count_matches_hand_count() {
        // One dense layer 4 -> 3: 12 weights + 3 biases.
        let spec = ModelSpec::mlp(vec![4, 3], 0);
        assert_eq!(spec.param_count().unwrap(), 15);
    }

    #[test]
    fn mlp_param_count_matches_formula() {
        let spec = ModelSpec::mlp(vec![10, 8, 6, 3], 0);
        let expect = (10 * 8 + 8) + (8 * 6 + 6) + (6 * 3 + 3);
        assert_eq!(spec.param_count().unwrap(), expect);
    }

    #[test]
    fn conv_param_count_matches_formula() {
        let img = ImageShape {
            height: 6,
            width: 6,
            channels: 1,
        };
        let spec = ModelSpec::small_conv(img, 4, 8, 3, 0);
        // conv: 4*1*9 + 4; pooled map is 2x2x4 = 16; dense 16->8; dense 8->3.
        let expect = (4 * 9 + 4) + (16 * 8 + 8) + (8 * 3 + 3);
        assert_eq!(spec.param_count().unwrap(), expect);
    }

    #[test]
    fn zero_params_give_zero_logits_both_archs() {
        let mlp = ModelSpec::mlp(vec![5, 4, 3], 0);
        let params = ParamVector::<f64>::zeros(Arc::new(ParamLayout::for_spec(&mlp).unwrap()));
        let z = forward(&mlp, &params, &[1.0, -2.0, 3.0, 0.5, 0.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        let img = ImageShape {
            height: 6,
            width: 6,
            channels: 1,
        };
        let conv = ModelSpec::small_conv(img, 2, 4, 3, 0);
        let params = ParamVector::<f64>::zeros(Arc::new(ParamLayout::for_spec(&conv).unwrap()));
        let x: Vec<f64> = (0..36).map(|i| i as f64 / 36.0).collect();
        let z = forward(&conv, &params, &x).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&[0.3f64, 0.3, 0.3, 0.3]);
        for &v in &p {
            approx(v, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let z = [1.0f64, -0.5, 2.5];
        let p1 = softmax(&z);
        let p2 = softmax(&[1.0 + 100.0, -0.5 + 100.0, 2.5 + 100.0]);
        for (a, b) in p1.iter().zip(&p2) {
            approx(*a, *b, 1e-12);
        }
        approx(p1.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0f32, 0.0]);
        assert!(p[0].is_finite() && p[1].is_finite());
        approx(p[0] as f64, 1.0, 1e-6);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform10 = vec![0.1f64; 10];
        approx(cross_entropy(&uniform10, 3), 10.0f64.ln(), 1e-12);
        let half = vec![0.5f64, 0.5];
        approx(cross_entropy(&half, 0), 2.0f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = vec![0.0f64, 1.0];
        let loss = cross_entropy(&p, 0);
        assert!(loss.is_finite());
        approx(loss, -LOG_EPS.ln(), 1e-9);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[2.0f32, 2.0]), 0);
    }

    #[test]
    fn linear_model_jacobian_rows_are_unit_class_outer_input() {
        // z = Wx + b, so d z_k / d W[o][i] = [k == o] * x_i and
        // d z_k / d b_o = [k == o]; truly parameter-independent.
        let spec = ModelSpec::mlp(vec![3, 2], 7);
        let params = init_params::<f64>(&spec).unwrap();
        let x = [0.5, -1.5, 2.0];
        let jac = logit_jacobian(&spec, &params, &x).unwrap();
        // Layout: 6 weights (rows of W), then 2 biases.
        let row0 = jac.row(0);
        assert_eq!(row0, &[0.5, -1.5, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let row1 = jac.row(1);
        assert_eq!(row1, &[0.0, 0.0, 0.0, 0.5, -1.5, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_input_gradient_equals_probability_residual_on_bias() {
        // With x = 0 the logits equal the biases (zero at init for the
        // zero-parameter vector), so probabilities are uniform and the only
        // nonzero gradient block is the output bias: p - onehot(y).
        let spec = ModelSpec::mlp(vec![3, 4], 0);
        let layout = Arc::new(ParamLayout::for_spec(&spec).unwrap());
        let params = ParamVector::<f64>::zeros(layout);
        let g = example_gradient(&spec, &params, &[0.0, 0.0, 0.0], 2).unwrap();
        let bias = g.block("layer0.bias").unwrap();
        approx(bias[0], 0.25, 1e-12);
        approx(bias[1], 0.25, 1e-12);
        approx(bias[2], 0.25 - 1.0, 1e-12);
        approx(bias[3], 0.25, 1e-12);
        assert!(g.block("layer0.weight").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_forward_matches_hand_computation() {
        // 1-channel 4x4 ramp input, single conv channel with only the kernel
        // center set to 1 => conv output is the center 2x2 crop; mean pool of
        // that single 2x2 block averages it.
        let img = ImageShape {
            height: 4,
            width: 4,
            channels: 1,
        };
        let spec = ModelSpec::small_conv(img, 1, 2, 2, 0);
        let layout = Arc::new(ParamLayout::for_spec(&spec).unwrap());
        let mut params = ParamVector::<f64>::zeros(layout);
        params.block_mut("layer0.weight").unwrap()[4] = 1.0; // kernel center
        // Pooled map has one unit; wire it straight through both dense layers.
        params.block_mut("layer1.weight").unwrap()[0] = 1.0; // hidden unit 0
        params.block_mut("layer2.weight").unwrap()[0] = 1.0; // class 0
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        // Center crop: values at (1,1),(1,2),(2,1),(2,2) = 5,6,9,10; mean 7.5.
        let z = forward(&spec, &params, &x).unwrap();
        approx(z[0], 7.5, 1e-12);
        approx(z[1], 0.0, 1e-12);
    }

    #[test]
    fn init_is_deterministic_and_biases_are_zero() {
        let spec = ModelSpec::mlp(vec![20, 16, 5], 42);
        let a = init_params::<f32>(&spec).unwrap();
        let b = init_params::<f32>(&spec).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a.block("layer0.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.block("layer1.bias").unwrap().iter().all(|&v| v == 0.0));

        let spec2 = ModelSpec::mlp(vec![20, 16, 5], 43);
        let c = init_params::<f32>(&spec2).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn init_weight_scale_tracks_fan_in() {
        let spec = ModelSpec::mlp(vec![200, 100, 10], 7);
        let p = init_params::<f64>(&spec).unwrap();
        let w0 = p.block("layer0.weight").unwrap();
        let var: f64 = w0.iter().map(|&v| v * v).sum::<f64>() / w0.len() as f64;
        let expect = 2.0 / 200.0;
        assert!((var - expect).abs() < expect * 0.2, "var {var} vs {expect}");
    }

    #[test]
    fn f32_and_f64_inits_come_from_the_same_draws() {
        let spec = ModelSpec::mlp(vec![6, 4, 3], 9);
        let a = init_params::<f32>(&spec).unwrap();
        let b = init_params::<f64>(&spec).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::mlp(vec![4], 0).validate().is_err());
        assert!(ModelSpec::mlp(vec![], 0).validate().is_err());
        let mut bad = ModelSpec::mlp(vec![4, 3], 0);
        bad.input_dim = 5;
        assert!(bad.validate().is_err());
        let img = ImageShape {
            height: 3,
            width: 6,
            channels: 1,
        };
        let mut conv = ModelSpec::small_conv(img, 2, 4, 3, 0);
        conv.input_dim = img.len();
        assert!(conv.validate().is_err()); // too small for conv+pool
    }

    #[test]
    fn shape_errors_are_reported() {
        let spec = ModelSpec::mlp(vec![3, 2], 0);
        let params = init_params::<f64>(&spec).unwrap();
        assert!(forward(&spec, &params, &[1.0, 2.0]).is_err());
        let other = ModelSpec::mlp(vec![4, 2], 0);
        let wrong = init_params::<f64>(&other).unwrap();
        assert!(forward(&spec, &wrong, &[1.0, 2.0, 3.0]).is_err());
        assert!(example_gradient(&spec, &params, &[1.0, 2.0, 3.0], 5).is_err());
    }
}
