//! Independent oracles for the manual backprop engine.
//!
//! Central finite differences (step 1e-5, f64) check every analytic gradient
//! and logit-Jacobian row on a zoo of random small models; closed forms check
//! the linear softmax model; and the cross-entropy gradient identity
//! g = sum_k (p_k - y_k) psi_k ties the two code paths together.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use datadiet_core::nn::{
    self, cross_entropy, softmax, ImageShape, ModelSpec, ParamLayout, ParamVector,
};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

fn loss_at(spec: &ModelSpec, layout: &Arc<ParamLayout>, theta: &[f64], x: &[f64], label: usize) -> f64 {
    let pv = ParamVector::from_data(layout.clone(), theta.to_vec()).unwrap();
    let logits = nn::forward(spec, &pv, x).unwrap();
    cross_entropy(&softmax(&logits), label)
}

fn logit_at(spec: &ModelSpec, layout: &Arc<ParamLayout>, theta: &[f64], x: &[f64], k: usize) -> f64 {
    let pv = ParamVector::from_data(layout.clone(), theta.to_vec()).unwrap();
    nn::forward(spec, &pv, x).unwrap()[k]
}

/// Central finite difference of `f` with respect to every coordinate.
fn central_diff(theta: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let hi = f(&work);
        work[i] = orig - FD_STEP;
        let lo = f(&work);
        work[i] = orig;
        out[i] = (hi - lo) / (2.0 * FD_STEP);
    }
    out
}

/// Max relative error with a small floor so exact zeros (dead ReLU paths)
/// compare by absolute difference instead of 0/0.
fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// A deterministic zoo of small models (< 500 params) with a sampled input
/// and label each. Mixes both architectures.
fn model_zoo(count: usize, seed: u64) -> Vec<(ModelSpec, Arc<ParamLayout>, Vec<f64>, Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zoo = Vec::new();
    for case in 0..count {
        let spec = if case % 4 == 3 {
            let side = 4 + (case / 4) % 3; // 4, 5, or 6 pixels square
            let img = ImageShape {
                height: side,
                width: side,
                channels: 1 + case % 2,
            };
            let ch = 1 + (case / 2) % 2;
            let hidden = 2 + case % 3;
            let classes = 2 + case % 3;
            ModelSpec::small_conv(img, ch, hidden, classes, rng.random())
        } else {
            let d = 2 + case % 5;
            let classes = 2 + case % 4;
            let widths = match case % 3 {
                0 => vec![d, classes],
                1 => vec![d, 4 + case % 4, classes],
                _ => vec![d, 5, 3, classes],
            };
            ModelSpec::mlp(widths, rng.random())
        };
        let layout = Arc::new(ParamLayout::for_spec(&spec).unwrap());
        assert!(layout.total() < 500, "zoo model too large: {}", layout.total());
        let params = nn::init_params::<f64>(&spec).unwrap();
        let x: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let label = rng.random_range(0..spec.classes);
        zoo.push((spec, layout, params.into_data(), x, label));
    }
    zoo
}

#[test]
fn example_gradient_matches_central_differences() {
    let zoo = model_zoo(24, 0xFEED_0001);
    for (spec, layout, theta, x, label) in &zoo {
        let pv = ParamVector::from_data(layout.clone(), theta.clone()).unwrap();
        let analytic = nn::example_gradient(spec, &pv, x, *label).unwrap();
        let fd = central_diff(theta, |t| loss_at(spec, layout, t, x, *label));
        let err = max_rel_err(analytic.as_slice(), &fd);
        assert!(
            err < FD_TOL,
            "{} {:?}: gradient rel err {err:.3e}",
            spec.arch,
            spec.widths
        );
    }
}

#[test]
fn logit_jacobian_rows_match_central_differences() {
    let zoo = model_zoo(24, 0xFEED_0002);
    for (spec, layout, theta, x, _) in &zoo {
        let pv = ParamVector::from_data(layout.clone(), theta.clone()).unwrap();
        let jac = nn::logit_jacobian(spec, &pv, x).unwrap();
        for k in 0..spec.classes {
            let fd = central_diff(theta, |t| logit_at(spec, layout, t, x, k));
            let err = max_rel_err(jac.row(k), &fd);
            assert!(
                err < FD_TOL,
                "{} {:?}: jacobian row {k} rel err {err:.3e}",
                spec.arch,
                spec.widths
            );
        }
    }
}

#[test]
fn gradient_decomposes_over_jacobian_rows() {
    // g = sum_k (p_k - y_k) psi_k, relative error < 1e-10 in f64.
    let zoo = model_zoo(100, 0xFEED_0003);
    for (spec, layout, theta, x, label) in &zoo {
        let pv = ParamVector::from_data(layout.clone(), theta.clone()).unwrap();
        let g = nn::example_gradient(spec, &pv, x, *label).unwrap();
        let jac = nn::logit_jacobian(spec, &pv, x).unwrap();
        let logits = nn::forward(spec, &pv, x).unwrap();
        let probs = softmax(&logits);
        let mut recon = vec![0.0f64; g.len()];
        for k in 0..spec.classes {
            let coeff = probs[k] - if k == *label { 1.0 } else { 0.0 };
            for (r, &j) in recon.iter_mut().zip(jac.row(k)) {
                *r += coeff * j;
            }
        }
        let num: f64 = g
            .as_slice()
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(den > 0.0, "degenerate case: zero gradient");
        assert!(
            num / den < 1e-10,
            "{} {:?}: reconstruction rel err {:.3e}",
            spec.arch,
            spec.widths,
            num / den
        );
    }
}

#[test]
fn linear_softmax_gradient_matches_closed_form() {
    // For z = Wx + b: dL/dW = (p - y) x^T, dL/db = p - y, so
    // ||g|| = ||p - y|| * sqrt(||x||^2 + 1).
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEED_0004);
    for _ in 0..20 {
        let d = 2 + rng.random_range(0..6);
        let k = 2 + rng.random_range(0..4);
        let mut widths = vec![d];
        widths.push(k);
        let spec = ModelSpec::mlp(widths, rng.random());
        let pv = nn::init_params::<f64>(&spec).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let label = rng.random_range(0..k);

        let g = nn::example_gradient(&spec, &pv, &x, label).unwrap();
        let logits = nn::forward(&spec, &pv, &x).unwrap();
        let probs = softmax(&logits);

        let w_grad = g.block("layer0.weight").unwrap();
        let b_grad = g.block("layer0.bias").unwrap();
        for o in 0..k {
            let resid = probs[o] - if o == label { 1.0 } else { 0.0 };
            assert!((b_grad[o] - resid).abs() < 1e-12);
            for i in 0..d {
                assert!((w_grad[o * d + i] - resid * x[i]).abs() < 1e-12);
            }
        }

        let g_norm: f64 = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let resid_norm: f64 = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let r = p - if i == label { 1.0 } else { 0.0 };
                r * r
            })
            .sum::<f64>()
            .sqrt();
        let x_norm_sq: f64 = x.iter().map(|v| v * v).sum();
        let expect = resid_norm * (x_norm_sq + 1.0).sqrt();
        assert!(
            (g_norm - expect).abs() < 1e-10 * expect.max(1.0),
            "norm {g_norm} vs closed form {expect}"
        );
    }
}

#[test]
fn forward_perturbation_is_consistent_with_jacobian() {
    // Nudging one weight by eps moves each logit by ~eps * psi_k[i].
    let zoo = model_zoo(8, 0xFEED_0005);
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEED_0006);
    for (spec, layout, theta, x, _) in &zoo {
        let pv = ParamVector::from_data(layout.clone(), theta.clone()).unwrap();
        let jac = nn::logit_jacobian(spec, &pv, x).unwrap();
        for _ in 0..5 {
            let i = rng.random_range(0..theta.len());
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            for k in 0..spec.classes {
                let fd = (logit_at(spec, layout, &hi, x, k) - logit_at(spec, layout, &lo, x, k))
                    / (2.0 * FD_STEP);
                let a = jac.row(k)[i];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < FD_TOL,
                    "coord {i} logit {k}: {a} vs {fd}"
                );
            }
        }
    }
}
