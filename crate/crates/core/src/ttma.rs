//! Test-time mixup augmentation estimators.
//!
//! A test input is mixed with K training partners, `x_mix = λ·x_test +
//! (1-λ)·x_train`. The classifier's output on the mix is unmixed back into a
//! label for the test input, `ŷ = (f(x_mix) - (1-λ)·y_train) / λ`, and the
//! argmax of every recovered label is one vote. The vote histogram gives the
//! prediction (majority) and the uncertainty (entropy).
//!
//! * Data uncertainty (DU) draws K partners from every class: M·K votes.
//! * Class-dependent uncertainty (CDU) draws K partners from a single class j.
//!
//! The draws for `(test sample, class)` come from their own random stream, so
//! the DU vote set is exactly the union of the per-class CDU vote sets under
//! the same seed, and the partners do not depend on `alpha`.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{mixup_pair, sample_lambda, DEFAULT_LAMBDA_MIN};
use crate::class_analysis::average_feature_distance;
use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::rng::{Purpose, RngStream};
use crate::types::{argmax, entropy, Dataset, Method, SoftLabel, UncertaintyRecord, VoteHistogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtmaConfig {
    pub alpha: f64,
    /// Partners drawn per class.
    pub k: usize,
    pub lambda_min: f64,
    pub seed: u64,
    /// Draw with replacement when a class has fewer than `k` samples.
    pub allow_replacement: bool,
    /// Use this λ for every draw instead of sampling one.
    pub fixed_lambda: Option<f64>,
}

impl Default for TtmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k: 30,
            lambda_min: DEFAULT_LAMBDA_MIN,
            seed: 0,
            allow_replacement: true,
            fixed_lambda: None,
        }
    }
}

impl TtmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad alpha {}", self.alpha)));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_min must lie in (0, 1], got {}",
                self.lambda_min
            )));
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= self.lambda_min && l <= 1.0) {
                return Err(Error::LambdaUnderflow {
                    lambda: l,
                    floor: self.lambda_min,
                });
            }
        }
        Ok(())
    }
}

/// One partner draw: which training sample and which mixing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupDraw {
    pub draw: usize,
    pub partner_class: usize,
    pub partner_id: u64,
    /// Position of the partner in the training set.
    pub partner_pos: usize,
    pub lambda: f64,
    pub alpha: f64,
}

/// The K draws for `(sample_id, class)`. Partners are drawn before the
/// mixing weights, so the partner list depends only on the seed, `k`, and
/// the training set.
pub fn plan_class_draws(
    sample_id: u64,
    class: usize,
    train: &Dataset,
    cfg: &TtmaConfig,
) -> Result<Vec<MixupDraw>> {
    if class >= train.class_count() {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: train.class_count(),
        });
    }
    let members = train.class_members(class);
    if members.is_empty() {
        return Err(Error::InsufficientSamples {
            class,
            available: 0,
            requested: cfg.k,
        });
    }
    let mut rng = RngStream::for_purpose(cfg.seed, Purpose::Mixup, sample_id, class);
    let picks: Vec<usize> = if cfg.k <= members.len() {
        index::sample(&mut rng, members.len(), cfg.k).into_vec()
    } else if cfg.allow_replacement {
        log::warn!(
            "class {class} has {} training samples, fewer than k = {}; sampling with replacement",
            members.len(),
            cfg.k
        );
        (0..cfg.k)
            .map(|_| rng.random_range(0..members.len()))
            .collect()
    } else {
        return Err(Error::InsufficientSamples {
            class,
            available: members.len(),
            requested: cfg.k,
        });
    };
    picks
        .into_iter()
        .enumerate()
        .map(|(draw, i)| {
            let pos = members[i];
            let lambda = match cfg.fixed_lambda {
                Some(l) => l,
                None => sample_lambda(cfg.alpha, cfg.lambda_min, &mut rng)?,
            };
            Ok(MixupDraw {
                draw,
                partner_class: class,
                partner_id: train.sample(pos).id,
                partner_pos: pos,
                lambda,
                alpha: cfg.alpha,
            })
        })
        .collect()
}

/// Recovers the test label from a prediction on a mixed input:
/// `(pred_mixup - (1 - λ)·y_train) / λ`. The result may leave the simplex.
pub fn infer_test_label(
    pred_mixup: &SoftLabel,
    y_train: &SoftLabel,
    lambda: f64,
    lambda_min: f64,
) -> Result<SoftLabel> {
    if !(lambda >= lambda_min) {
        return Err(Error::LambdaUnderflow {
            lambda,
            floor: lambda_min,
        });
    }
    if pred_mixup.len() != y_train.len() {
        return Err(Error::ShapeMismatch {
            expected: y_train.len(),
            found: pred_mixup.len(),
        });
    }
    Ok(SoftLabel::new(
        pred_mixup
            .values()
            .iter()
            .zip(y_train.values())
            .map(|(p, y)| (p - (1.0 - lambda) * y) / lambda)
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredLabel {
    pub draw: MixupDraw,
    pub soft: SoftLabel,
    pub hard: usize,
}

/// All recovered labels of one pipeline run: M·K for DU, K for CDU.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InferredLabelSet {
    pub labels: Vec<InferredLabel>,
}

impl InferredLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self, class_count: usize) -> VoteHistogram {
        let mut h = VoteHistogram::new(class_count);
        for l in &self.labels {
            h.record(l.hard);
        }
        h
    }
}

/// Prediction and entropy of a vote histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub predicted_class: usize,
    pub uncertainty: f64,
    pub histogram: VoteHistogram,
}

impl VoteOutcome {
    pub fn from_histogram(histogram: VoteHistogram) -> Result<Self> {
        Ok(Self {
            predicted_class: histogram.majority()?,
            uncertainty: entropy(&histogram)?,
            histogram,
        })
    }

    /// Share of votes for the predicted class.
    pub fn confidence(&self) -> f64 {
        self.histogram.fraction(self.predicted_class)
    }

    pub fn record(&self, sample_id: u64, method: Method, true_class: usize) -> UncertaintyRecord {
        UncertaintyRecord::new(
            sample_id,
            method,
            self.predicted_class,
            true_class,
            self.uncertainty,
            self.histogram.class_count(),
            self.confidence(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtmaOutcome {
    pub vote: VoteOutcome,
    pub labels: InferredLabelSet,
}

fn run_draws<P: Predictor + ?Sized>(
    x_test: &[f64],
    draws: Vec<MixupDraw>,
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
    out: &mut Vec<InferredLabel>,
) -> Result<()> {
    for draw in draws {
        let partner = train.sample(draw.partner_pos);
        let mixed = mixup_pair(x_test, &partner.data, draw.lambda)?;
        let pred = f.predict(&mixed)?;
        let soft = infer_test_label(&pred, &partner.label, draw.lambda, cfg.lambda_min)?;
        let hard = argmax(soft.values())?;
        out.push(InferredLabel { draw, soft, hard });
    }
    Ok(())
}

fn check_inputs<P: Predictor + ?Sized>(
    x_test: &[f64],
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
) -> Result<()> {
    cfg.validate()?;
    train.shape().check(x_test)?;
    if f.class_count() != train.class_count() {
        return Err(Error::InvalidArgument(format!(
            "predictor has {} classes, training set has {}",
            f.class_count(),
            train.class_count()
        )));
    }
    Ok(())
}

/// Data uncertainty: K partners from each of the M classes.
pub fn run_du<P: Predictor + ?Sized>(
    x_test: &[f64],
    sample_id: u64,
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
) -> Result<TtmaOutcome> {
    check_inputs(x_test, train, f, cfg)?;
    let m = train.class_count();
    let mut labels = Vec::with_capacity(m * cfg.k);
    for class in 0..m {
        let draws = plan_class_draws(sample_id, class, train, cfg)?;
        run_draws(x_test, draws, train, f, cfg, &mut labels)?;
    }
    let labels = InferredLabelSet { labels };
    let vote = VoteOutcome::from_histogram(labels.histogram(m))?;
    Ok(TtmaOutcome { vote, labels })
}

/// Class-dependent uncertainty: K partners from `class_j` only.
pub fn run_cdu<P: Predictor + ?Sized>(
    x_test: &[f64],
    sample_id: u64,
    class_j: usize,
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
) -> Result<TtmaOutcome> {
    check_inputs(x_test, train, f, cfg)?;
    let draws = plan_class_draws(sample_id, class_j, train, cfg)?;
    let mut labels = Vec::with_capacity(cfg.k);
    run_draws(x_test, draws, train, f, cfg, &mut labels)?;
    let labels = InferredLabelSet { labels };
    let vote = VoteOutcome::from_histogram(labels.histogram(train.class_count()))?;
    Ok(TtmaOutcome { vote, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMode {
    Du,
    CduAllClasses,
}

/// Runs the estimator over a test set. DU mode yields one record per test
/// sample; CDU mode yields one record per (sample, partner class) in class
/// order, each carrying the average feature distance to that class over the
/// same K partners. Output order follows the test set regardless of how the
/// work is scheduled.
pub fn batch_estimate<P: Predictor + ?Sized>(
    test: &Dataset,
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
    mode: EstimateMode,
) -> Result<Vec<UncertaintyRecord>> {
    let per_sample: Vec<Vec<UncertaintyRecord>> = test
        .samples()
        .par_iter()
        .map(|s| -> Result<Vec<UncertaintyRecord>> {
            match mode {
                EstimateMode::Du => {
                    let out = run_du(&s.data, s.id, train, f, cfg)?;
                    Ok(vec![out.vote.record(s.id, Method::TtmaDu, s.class())])
                }
                EstimateMode::CduAllClasses => (0..train.class_count())
                    .map(|j| {
                        let out = run_cdu(&s.data, s.id, j, train, f, cfg)?;
                        let partners: Vec<&[f64]> = out
                            .labels
                            .labels
                            .iter()
                            .map(|l| train.sample(l.draw.partner_pos).data.as_slice())
                            .collect();
                        let afd = average_feature_distance(f, &s.data, &partners)?;
                        let mut rec = out.vote.record(s.id, Method::TtmaCdu, s.class());
                        rec.partner_class = Some(j);
                        rec.afd = Some(afd);
                        Ok(rec)
                    })
                    .collect(),
            }
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Preset};
    use crate::predictor::{train_reference, Mlp, TrainConfig};
    use crate::types::LabeledSample;
    use proptest::prelude::*;

    fn fixture() -> (Dataset, Mlp) {
        let ds = generate_synthetic(&Preset::Blobs.spec(3, 2, 40, 1)).unwrap();
        let model = train_reference(
            &ds,
            &TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        (ds, model)
    }

    fn cfg(k: usize) -> TtmaConfig {
        TtmaConfig {
            k,
            seed: 3,
            ..TtmaConfig::default()
        }
    }

    #[test]
    fn infer_examples() {
        let pred = SoftLabel::new(vec![0.6, 0.4]);
        let y = SoftLabel::one_hot(1, 2).unwrap();
        assert_eq!(infer_test_label(&pred, &y, 1.0, 0.05).unwrap(), pred);
        let out = infer_test_label(&pred, &y, 0.5, 0.05).unwrap();
        assert!((out.values()[0] - 1.2).abs() < 1e-15);
        assert!((out.values()[1] + 0.2).abs() < 1e-15);
        assert_eq!(argmax(out.values()).unwrap(), 0);
        assert!(matches!(
            infer_test_label(&pred, &y, 0.01, 0.05),
            Err(Error::LambdaUnderflow { .. })
        ));
    }

    proptest! {
        #[test]
        fn inferred_label_round_trips(
            raw in prop::collection::vec(0.001f64..1.0, 2..8),
            class_seed in 0usize..100,
            lambda in 0.05f64..=1.0,
        ) {
            let sum: f64 = raw.iter().sum();
            let pred = SoftLabel::new(raw.iter().map(|v| v / sum).collect());
            let y = SoftLabel::one_hot(class_seed % raw.len(), raw.len()).unwrap();
            let inferred = infer_test_label(&pred, &y, lambda, 0.05).unwrap();
            for ((yh, yt), p) in inferred.values().iter().zip(y.values()).zip(pred.values()) {
                prop_assert!((lambda * yh + (1.0 - lambda) * yt - p).abs() < 1e-12);
            }
            let numerator: Vec<f64> = pred.values().iter().zip(y.values())
                .map(|(p, y)| p - (1.0 - lambda) * y).collect();
            prop_assert_eq!(argmax(inferred.values()).unwrap(), argmax(&numerator).unwrap());
        }

        #[test]
        fn majority_matches_brute_force(counts in prop::collection::vec(0u64..6, 2..9)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let h = VoteHistogram::from_counts(counts.clone());
            let max = *counts.iter().max().unwrap();
            let brute = counts.iter().position(|&c| c == max).unwrap();
            prop_assert_eq!(h.majority().unwrap(), brute);
        }
    }

    #[test]
    fn du_count_and_bounds() {
        let (ds, model) = fixture();
        let x = &ds.sample(5).data;
        let out = run_du(x, 5, &ds, &model, &cfg(10)).unwrap();
        assert_eq!(out.labels.len(), 30);
        assert_eq!(out.vote.histogram.total(), 30);
        assert!(out.vote.uncertainty >= 0.0 && out.vote.uncertainty <= 3f64.ln() + 1e-12);
        let direct = {
            let total = out.vote.histogram.total() as f64;
            let mut h = 0.0;
            for &c in out.vote.histogram.counts() {
                if c > 0 {
                    let p = c as f64 / total;
                    h -= p * p.ln();
                }
            }
            h
        };
        assert!((out.vote.uncertainty - direct).abs() < 1e-12);
    }

    #[test]
    fn du_is_union_of_cdu() {
        let (ds, model) = fixture();
        let x = &ds.sample(17).data;
        let c = cfg(8);
        let du = run_du(x, 17, &ds, &model, &c).unwrap();
        let mut merged = VoteHistogram::new(3);
        let mut all = Vec::new();
        for j in 0..3 {
            let cdu = run_cdu(x, 17, j, &ds, &model, &c).unwrap();
            assert_eq!(cdu.vote.histogram.total(), 8);
            merged.merge(&cdu.vote.histogram);
            all.extend(cdu.labels.labels);
        }
        assert_eq!(merged, du.vote.histogram);
        assert_eq!(all, du.labels.labels);
    }

    #[test]
    fn unit_lambda_is_plain_prediction() {
        let (ds, model) = fixture();
        let c = TtmaConfig {
            fixed_lambda: Some(1.0),
            ..cfg(10)
        };
        for pos in [0, 50, 100] {
            let x = &ds.sample(pos).data;
            let expected = model.predict(x).unwrap().argmax().unwrap();
            let du = run_du(x, pos as u64, &ds, &model, &c).unwrap();
            assert_eq!(du.vote.uncertainty, 0.0);
            assert_eq!(du.vote.predicted_class, expected);
            for j in 0..3 {
                let cdu = run_cdu(x, pos as u64, j, &ds, &model, &c).unwrap();
                assert_eq!(cdu.vote.uncertainty, 0.0);
                assert_eq!(cdu.vote.predicted_class, expected);
            }
        }
    }

    #[test]
    fn replacement_rules() {
        let (ds, model) = fixture();
        let x = &ds.sample(0).data;
        let strict = TtmaConfig {
            allow_replacement: false,
            ..cfg(41)
        };
        assert!(matches!(
            run_du(x, 0, &ds, &model, &strict),
            Err(Error::InsufficientSamples { .. })
        ));
        let loose = cfg(41);
        assert_eq!(run_du(x, 0, &ds, &model, &loose).unwrap().labels.len(), 123);
    }

    #[test]
    fn partners_without_replacement_are_distinct() {
        let (ds, _) = fixture();
        let draws = plan_class_draws(4, 1, &ds, &cfg(40)).unwrap();
        let mut ids: Vec<u64> = draws.iter().map(|d| d.partner_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(draws.iter().all(|d| d.partner_class == 1));
    }

    #[test]
    fn partners_independent_of_alpha() {
        let (ds, _) = fixture();
        let a = plan_class_draws(2, 0, &ds, &cfg(10)).unwrap();
        let b = plan_class_draws(2, 0, &ds, &TtmaConfig { alpha: 1.0, ..cfg(10) }).unwrap();
        let ids = |d: &[MixupDraw]| d.iter().map(|d| d.partner_id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn batch_counts_and_determinism() {
        let (ds, model) = fixture();
        let test = ds.subset(&[0, 1, 45, 90, 119]).unwrap();
        let c = cfg(5);
        let du = batch_estimate(&test, &ds, &model, &c, EstimateMode::Du).unwrap();
        assert_eq!(du.len(), 5);
        let cdu = batch_estimate(&test, &ds, &model, &c, EstimateMode::CduAllClasses).unwrap();
        assert_eq!(cdu.len(), 15);
        assert!(cdu.iter().all(|r| r.afd.is_some() && r.partner_class.is_some()));
        let again = batch_estimate(&test, &ds, &model, &c, EstimateMode::Du).unwrap();
        assert_eq!(du, again);
        for r in &du {
            assert!((r.normalized_uncertainty - r.uncertainty / 3f64.ln()).abs() < 1e-12);
        }

        let empty = ds.subset(&[]).unwrap();
        assert!(batch_estimate(&empty, &ds, &model, &c, EstimateMode::Du)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn batch_independent_of_thread_count() {
        let (ds, model) = fixture();
        let test = ds.subset(&(0..30).collect::<Vec<_>>()).unwrap();
        let c = cfg(5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| batch_estimate(&test, &ds, &model, &c, EstimateMode::Du).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (ds, model) = fixture();
        let bad = LabeledSample {
            id: 0,
            data: vec![1.0],
            label: SoftLabel::one_hot(0, 3).unwrap(),
        };
        assert!(run_du(&bad.data, 0, &ds, &model, &cfg(2)).is_err());
    }
}
