//! Maximization-expectation inference for the nonnegative linear-Gaussian
//! Indian-buffet-process model.
//!
//! Data `X` (N×D) is modeled as `X = Z A + E`, with `Z` an N×K binary feature
//! assignment matrix drawn from an Indian buffet process and `A` a K×D
//! nonnegative factor matrix with truncated-Gaussian prior. Inference keeps a
//! point estimate of `Z` (the "maximization" half) and a fully factorized
//! truncated-Gaussian variational posterior over `A` (the "expectation" half).
//! Each row of `Z` is updated by maximizing a submodular set function with a
//! deterministic local search, so every sweep monotonically increases a single
//! evidence lower bound.
//!
//! Module map:
//! - [`numerics`]: scaled complementary error function, truncated-Gaussian
//!   moments and entropy, log-factorials, harmonic numbers.
//! - [`model`]: datasets (with holdout masks and preprocessing), the binary
//!   feature matrix, hyperparameters, and the feature-assignment log priors.
//! - [`variational`]: factor posterior updates, the evidence lower bound, and
//!   optional gamma hyperposterior updates.
//! - [`rowopt`]: per-row submodular objectives and the optimizers (local
//!   search, randomized double greedy, brute force).
//! - [`engine`]: model state, sweeps, convergence, checkpoints.
//! - [`synth`]: synthetic data generators and holdout mask construction.
//! - [`evaluate`]: held-out predictive likelihood and structure-recovery
//!   reports.
//! - [`cli`]: the `meibp` command-line interface and benchmark drivers.

pub mod bitset;
pub mod cli;
pub mod engine;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod numerics;
pub mod rowopt;
pub mod synth;
pub mod variational;

pub use error::{Error, Result};
