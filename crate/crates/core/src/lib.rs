//! Test-time mixup augmentation (TTMA) uncertainty estimation.
//!
//! A test input is mixed with training samples, the classifier's prediction
//! on each mix is unmixed back into a label for the test input, and the
//! entropy of the resulting hard-label votes measures how stable the
//! prediction is. Mixing with every class gives a per-sample data
//! uncertainty; mixing with one class gives a class-dependent uncertainty
//! that, together with feature distances, separates class confusion from
//! class similarity.
//!
//! The crate also ships the conventional baselines (affine test-time
//! augmentation, Monte Carlo dropout), a small mixup-trained reference
//! classifier, synthetic datasets, and selective-prediction / calibration
//! metrics.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod baselines;
pub mod class_analysis;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod predictor;
pub mod records;
pub mod rng;
pub mod ttma;
pub mod types;

pub use error::{Error, Result};
pub use predictor::{Mlp, Predictor, TrainConfig};
pub use rng::RngStream;
pub use ttma::{run_cdu, run_du, TtmaConfig};
pub use types::{entropy, Dataset, Method, SoftLabel, UncertaintyRecord, VoteHistogram};
