//! Conventional comparison estimators sharing the vote-histogram entropy
//! definition: test-time augmentation (input perturbation) and Monte Carlo
//! dropout (model perturbation). Plus the single-pass softmax reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{affine_augment, AffineConfig};
use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::rng::{Purpose, RngStream};
use crate::ttma::VoteOutcome;
use crate::types::{argmax, prob_entropy, Dataset, Method, Shape, UncertaintyRecord, VoteHistogram};

pub const DEFAULT_PASSES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub tta_passes: usize,
    pub mcdo_passes: usize,
    pub mcdo_dropout: f64,
    pub affine: AffineConfig,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            tta_passes: DEFAULT_PASSES,
            mcdo_passes: DEFAULT_PASSES,
            mcdo_dropout: 0.5,
            affine: AffineConfig::default(),
            seed: 0,
        }
    }
}

fn check_passes(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one pass".into()));
    }
    Ok(())
}

/// Votes over `n` randomly augmented copies of `x_test`.
pub fn tta_uncertainty<P: Predictor + ?Sized>(
    x_test: &[f64],
    sample_id: u64,
    shape: Shape,
    f: &P,
    cfg: &AffineConfig,
    n: usize,
    seed: u64,
) -> Result<VoteOutcome> {
    check_passes(n)?;
    let mut rng = RngStream::for_purpose(seed, Purpose::Tta, sample_id, 0);
    let mut hist = VoteHistogram::new(f.class_count());
    for _ in 0..n {
        let x = affine_augment(x_test, shape, cfg, &mut rng)?;
        hist.record(argmax(f.predict(&x)?.values())?);
    }
    VoteOutcome::from_histogram(hist)
}

/// Votes over `n` dropout-perturbed forward passes.
pub fn mcdo_uncertainty<P: Predictor + ?Sized>(
    x_test: &[f64],
    sample_id: u64,
    f: &P,
    dropout: f64,
    n: usize,
    seed: u64,
) -> Result<VoteOutcome> {
    check_passes(n)?;
    let mut rng = RngStream::for_purpose(seed, Purpose::Mcdo, sample_id, 0);
    let mut hist = VoteHistogram::new(f.class_count());
    for _ in 0..n {
        hist.record(argmax(f.predict_stochastic(x_test, dropout, &mut rng)?.values())?);
    }
    VoteOutcome::from_histogram(hist)
}

/// One record per test sample for TTA, MCDO, or the single-pass softmax
/// (uncertainty = predictive entropy, confidence = max probability).
pub fn batch_baseline<P: Predictor + ?Sized>(
    test: &Dataset,
    f: &P,
    cfg: &BaselineConfig,
    method: Method,
) -> Result<Vec<UncertaintyRecord>> {
    let m = f.class_count();
    test.samples()
        .par_iter()
        .map(|s| match method {
            Method::Tta => Ok(tta_uncertainty(
                &s.data,
                s.id,
                test.shape(),
                f,
                &cfg.affine,
                cfg.tta_passes,
                cfg.seed,
            )?
            .record(s.id, method, s.class())),
            Method::Mcdo => Ok(mcdo_uncertainty(
                &s.data,
                s.id,
                f,
                cfg.mcdo_dropout,
                cfg.mcdo_passes,
                cfg.seed,
            )?
            .record(s.id, method, s.class())),
            Method::Single => {
                let p = f.predict(&s.data)?;
                let pred = argmax(p.values())?;
                Ok(UncertaintyRecord::new(
                    s.id,
                    method,
                    pred,
                    s.class(),
                    prob_entropy(p.values()),
                    m,
                    p.values()[pred],
                ))
            }
            other => Err(Error::InvalidArgument(format!(
                "{other} is not a baseline method"
            ))),
        })
        .collect()
}
