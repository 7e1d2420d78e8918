//! Per-example importance scoring and data-pruning toolkit for small networks.
//!
//! The crate trains dense feedforward classifiers with deterministic seeded SGD,
//! scores every training example by gradient norm (GraNd), error norm (EL2N), or
//! forgetting counts, prunes datasets by score, retrains on the pruned subsets,
//! and probes training dynamics of example subpopulations through empirical-NTK
//! kernel velocity and linear-mode-connectivity error barriers.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`nn`]: model family, manual backpropagation, per-example gradients and
//!   per-logit Jacobians
//! - [`data`]: dataset ingestion (IDX, CIFAR binary), synthetic task generation,
//!   label corruption, subsetting, and the `.ddset` snapshot format
//! - [`trainer`]: seeded SGD with momentum, weight decay, stepped LR schedule,
//!   checkpoints, and per-presentation correctness logging
//! - [`scores`]: GraNd / EL2N / forgetting score tables, multi-run averaging,
//!   Spearman rank correlation
//! - [`pruning`]: score-based subset selection and the retrain harness
//! - [`dynamics`]: NTK gram submatrices, kernel velocity, weight interpolation,
//!   and error barriers between spawned child trajectories
//!
//! All randomized operations are deterministic functions of their seeds; repeated
//! runs with identical configurations produce byte-identical artifacts.

pub mod data;
pub mod fsio;
pub mod linalg;
pub mod nn;
pub mod scalar;
pub mod seeds;
pub mod dynamics;
pub mod pruning;
pub mod scores;
pub mod trainer;

pub use scalar::Scalar;
