//! Domain types shared by every pipeline, plus the two numeric primitives the
//! estimators are built on: hard-label argmax and histogram entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for "sums to one" checks on predictor outputs.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// A length-M vector of class scores.
///
/// Predictor outputs are probability vectors. Labels recovered by undoing a
/// mixup are not: they may contain negative entries and need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn one_hot(class: usize, class_count: usize) -> Result<Self> {
        if class >= class_count {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: class_count,
            });
        }
        let mut values = vec![0.0; class_count];
        values[class] = 1.0;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> Result<usize> {
        argmax(&self.0)
    }

    /// Index of the single 1.0 entry when the label is one-hot.
    pub fn one_hot_class(&self) -> Option<usize> {
        let mut hit = None;
        for (i, &v) in self.0.iter().enumerate() {
            if v == 1.0 {
                if hit.is_some() {
                    return None;
                }
                hit = Some(i);
            } else if v != 0.0 {
                return None;
            }
        }
        hit
    }

    pub fn is_probability(&self) -> bool {
        let sum: f64 = self.0.iter().sum();
        self.0.iter().all(|v| (0.0..=1.0).contains(v)) && (sum - 1.0).abs() <= SIMPLEX_TOLERANCE
    }
}

/// Smallest index attaining the maximum score.
pub fn argmax(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("argmax of an empty vector".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NonFiniteScore);
        }
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn argmax_class(label: &SoftLabel) -> Result<usize> {
    label.argmax()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vector,
    Image,
}

/// Per-sample tensor layout. Images are stored row-major as `[y][x][channel]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "snake_case")]
pub enum Shape {
    Vector {
        dim: usize,
    },
    Image {
        width: usize,
        height: usize,
        channels: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector { dim } => dim,
            Shape::Image {
                width,
                height,
                channels,
            } => width * height * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self) -> Modality {
        match self {
            Shape::Vector { .. } => Modality::Vector,
            Shape::Image { .. } => Modality::Image,
        }
    }

    pub fn check(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                found: data.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Vector { dim } => write!(f, "{dim}"),
            Shape::Image {
                width,
                height,
                channels,
            } => write!(f, "{width}x{height}x{channels}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: u64,
    pub data: Vec<f64>,
    pub label: SoftLabel,
}

impl LabeledSample {
    /// Ground-truth class. Dataset construction guarantees a one-hot label.
    pub fn class(&self) -> usize {
        self.label
            .one_hot_class()
            .expect("dataset samples carry one-hot labels")
    }
}

/// An ordered, immutable collection of samples sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    class_count: usize,
    shape: Shape,
    // class -> positions in `samples`
    per_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, class_count: usize, shape: Shape) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidSpec(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        let mut per_class = vec![Vec::new(); class_count];
        for (pos, s) in samples.iter().enumerate() {
            shape.check(&s.data)?;
            if s.label.len() != class_count {
                return Err(Error::InvalidSpec(format!(
                    "sample {} has a label of length {}, expected {class_count}",
                    s.id,
                    s.label.len()
                )));
            }
            let class = s.label.one_hot_class().ok_or_else(|| {
                Error::InvalidSpec(format!("sample {} label is not one-hot", s.id))
            })?;
            per_class[class].push(pos);
        }
        Ok(Self {
            samples,
            class_count,
            shape,
            per_class,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn sample(&self, pos: usize) -> &LabeledSample {
        &self.samples[pos]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Positions (not ids) of the samples labelled `class`.
    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.per_class[class]
    }

    pub fn class_ids(&self, class: usize) -> Vec<u64> {
        self.per_class[class]
            .iter()
            .map(|&p| self.samples[p].id)
            .collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// New dataset made of the samples at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let samples = positions.iter().map(|&p| self.samples[p].clone()).collect();
        Self::new(samples, self.class_count, self.shape)
    }
}

/// Counts of hard labels over the M classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl VoteHistogram {
    pub fn new(class_count: usize) -> Self {
        Self {
            counts: vec![0; class_count],
            total: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn record(&mut self, class: usize) {
        self.counts[class] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &VoteHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    /// Majority vote; ties go to the lowest class index.
    pub fn majority(&self) -> Result<usize> {
        if self.total == 0 {
            return Err(Error::EmptyHistogram);
        }
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn fraction(&self, class: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts[class] as f64 / self.total as f64
    }
}

/// Natural-log entropy of the vote distribution. Zero-count classes contribute
/// nothing.
pub fn entropy(hist: &VoteHistogram) -> Result<f64> {
    if hist.total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let total = hist.total as f64;
    let h = hist
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>();
    // a single occupied class gives -1·ln(1) = -0.0
    Ok(h.max(0.0))
}

/// Natural-log entropy of a probability vector.
pub fn prob_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Divides by ln(M), the entropy of the uniform distribution.
pub fn normalize_uncertainty(uncertainty: f64, class_count: usize) -> f64 {
    uncertainty / (class_count as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TtmaDu,
    TtmaCdu,
    Tta,
    Mcdo,
    Single,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TtmaDu,
        Method::TtmaCdu,
        Method::Tta,
        Method::Mcdo,
        Method::Single,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::TtmaDu => "ttma_du",
            Method::TtmaCdu => "ttma_cdu",
            Method::Tta => "tta",
            Method::Mcdo => "mcdo",
            Method::Single => "single",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "ttma_du" => Ok(Method::TtmaDu),
            "ttma_cdu" => Ok(Method::TtmaCdu),
            "tta" => Ok(Method::Tta),
            "mcdo" => Ok(Method::Mcdo),
            "single" => Ok(Method::Single),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// One estimate for one test sample (or one sample × partner class for CDU).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub sample_id: u64,
    pub method: Method,
    /// Partner class for class-dependent estimates.
    pub partner_class: Option<usize>,
    pub predicted_class: usize,
    pub true_class: usize,
    pub uncertainty: f64,
    pub normalized_uncertainty: f64,
    pub confidence: f64,
    /// Average feature distance to the partner class (CDU records only).
    pub afd: Option<f64>,
}

impl UncertaintyRecord {
    pub fn new(
        sample_id: u64,
        method: Method,
        predicted_class: usize,
        true_class: usize,
        uncertainty: f64,
        class_count: usize,
        confidence: f64,
    ) -> Self {
        Self {
            sample_id,
            method,
            partner_class: None,
            predicted_class,
            true_class,
            uncertainty,
            normalized_uncertainty: normalize_uncertainty(uncertainty, class_count),
            confidence,
            afd: None,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted_class == self.true_class
    }
}
