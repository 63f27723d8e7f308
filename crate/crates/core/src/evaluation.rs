//! Selective-prediction and calibration metrics over uncertainty records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Method, UncertaintyRecord};

pub const DEFAULT_ECE_BINS: usize = 10;
pub const DEFAULT_HIST_BIN_WIDTH: f64 = 0.1;

/// `0, 0.05, ..., 0.95`.
pub fn default_rejection_rates() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rate: f64,
    pub accuracy: f64,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub points: Vec<CurvePoint>,
}

impl RejectionCurve {
    pub fn accuracy_at(&self, rate: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.rate - rate).abs() < 1e-12)
            .map(|p| p.accuracy)
    }
}

/// Rejects the most uncertain fraction `T` of records and reports accuracy on
/// the rest, for each `T` in `rates`. Ranking is by normalized uncertainty,
/// descending, ties broken by ascending sample id. At least one record is
/// always retained.
pub fn accuracy_rejection_curve(
    records: &[UncertaintyRecord],
    rates: &[f64],
) -> Result<RejectionCurve> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if rates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "rejection rates must be strictly increasing".into(),
        ));
    }
    if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::InvalidArgument("rejection rates must lie in [0, 1)".into()));
    }
    let mut ranked: Vec<&UncertaintyRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        b.normalized_uncertainty
            .total_cmp(&a.normalized_uncertainty)
            .then(a.sample_id.cmp(&b.sample_id))
            .then(a.partner_class.cmp(&b.partner_class))
    });
    let n = ranked.len();
    // suffix sums of correctness so each rate is O(1)
    let mut correct_from = vec![0usize; n + 1];
    for i in (0..n).rev() {
        correct_from[i] = correct_from[i + 1] + ranked[i].is_correct() as usize;
    }
    let points = rates
        .iter()
        .map(|&rate| {
            // the epsilon absorbs representation error in rates like 0.35
            let rejected = ((rate * n as f64 + 1e-9).floor() as usize).min(n - 1);
            let retained = n - rejected;
            CurvePoint {
                rate,
                accuracy: correct_from[rejected] as f64 / retained as f64,
                retained,
            }
        })
        .collect();
    Ok(RejectionCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Expected calibration error over equal-width confidence bins. Bins are
/// `[lo, hi)` except the last, which includes 1.0. Empty bins report zero
/// confidence and accuracy and contribute nothing.
pub fn ece(records: &[UncertaintyRecord], bins: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} outside [0, 1]",
                r.confidence
            )));
        }
        let b = ((r.confidence * bins as f64).floor() as usize).min(bins - 1);
        conf_sum[b] += r.confidence;
        hits[b] += r.is_correct() as usize;
        counts[b] += 1;
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    let bins = (0..bins)
        .map(|b| {
            let count = counts[b];
            let (mean_confidence, accuracy) = if count > 0 {
                (conf_sum[b] / count as f64, hits[b] as f64 / count as f64)
            } else {
                (0.0, 0.0)
            };
            total += count as f64 / n * (accuracy - mean_confidence).abs();
            CalibrationBin {
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                mean_confidence,
                accuracy,
                count,
            }
        })
        .collect();
    Ok(CalibrationReport { bins, ece: total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub correct: usize,
    pub incorrect: usize,
}

/// Normalized-uncertainty histograms of correct and incorrect records over
/// `[0, 1]`, sharing bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistograms {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

impl UncertaintyHistograms {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.correct + b.incorrect).sum()
    }

    /// `Σ min(p_correct, p_incorrect)` over bins, where each side is
    /// normalized to a distribution. Zero when one side is empty.
    pub fn overlap_coefficient(&self) -> f64 {
        let nc: usize = self.bins.iter().map(|b| b.correct).sum();
        let ni: usize = self.bins.iter().map(|b| b.incorrect).sum();
        if nc == 0 || ni == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| (b.correct as f64 / nc as f64).min(b.incorrect as f64 / ni as f64))
            .sum()
    }
}

pub fn uncertainty_histograms(
    records: &[UncertaintyRecord],
    bin_width: f64,
) -> Result<UncertaintyHistograms> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bin width must lie in (0, 1], got {bin_width}"
        )));
    }
    let n_bins = ((1.0 / bin_width) - 1e-9).ceil().max(1.0) as usize;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|b| HistogramBin {
            lo: b as f64 * bin_width,
            hi: ((b + 1) as f64 * bin_width).min(1.0),
            correct: 0,
            incorrect: 0,
        })
        .collect();
    for r in records {
        let u = r.normalized_uncertainty.clamp(0.0, 1.0);
        let b = ((u / bin_width).floor() as usize).min(n_bins - 1);
        if r.is_correct() {
            bins[b].correct += 1;
        } else {
            bins[b].incorrect += 1;
        }
    }
    Ok(UncertaintyHistograms { bin_width, bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ece_bins: usize,
    pub hist_bin_width: f64,
    pub rejection_rates: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ece_bins: DEFAULT_ECE_BINS,
            hist_bin_width: DEFAULT_HIST_BIN_WIDTH,
            rejection_rates: default_rejection_rates(),
        }
    }
}

/// Everything reported for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub records: usize,
    pub accuracy: f64,
    pub mean_normalized_uncertainty: f64,
    pub mean_uncertainty_correct: Option<f64>,
    pub mean_uncertainty_incorrect: Option<f64>,
    pub overlap_coefficient: f64,
    pub curve: RejectionCurve,
    pub calibration: CalibrationReport,
    pub histograms: UncertaintyHistograms,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize_method(
    method: Method,
    records: &[UncertaintyRecord],
    cfg: &EvalConfig,
) -> Result<MethodSummary> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let histograms = uncertainty_histograms(records, cfg.hist_bin_width)?;
    Ok(MethodSummary {
        method,
        records: records.len(),
        accuracy: records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64,
        mean_normalized_uncertainty: mean(records.iter().map(|r| r.normalized_uncertainty))
            .expect("non-empty"),
        mean_uncertainty_correct: mean(
            records
                .iter()
                .filter(|r| r.is_correct())
                .map(|r| r.normalized_uncertainty),
        ),
        mean_uncertainty_incorrect: mean(
            records
                .iter()
                .filter(|r| !r.is_correct())
                .map(|r| r.normalized_uncertainty),
        ),
        overlap_coefficient: histograms.overlap_coefficient(),
        curve: accuracy_rejection_curve(records, &cfg.rejection_rates)?,
        calibration: ece(records, cfg.ece_bins)?,
        histograms,
    })
}

/// Splits records by method and summarizes each, in method order.
pub fn summarize(records: &[UncertaintyRecord], cfg: &EvalConfig) -> Result<Vec<MethodSummary>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut by_method: BTreeMap<Method, Vec<UncertaintyRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method).or_default().push(r.clone());
    }
    by_method
        .into_iter()
        .map(|(m, recs)| summarize_method(m, &recs, cfg))
        .collect()
}
