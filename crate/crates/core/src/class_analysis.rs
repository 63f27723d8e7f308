//! Average feature distance and the confusion / similarity reading of
//! class-dependent uncertainty.
//!
//! Two classes that overlap in feature space (confusion) show a low feature
//! distance and a high class-dependent uncertainty. Classes that are close but
//! separable (similarity) show a low distance and a low uncertainty.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::ttma::{batch_estimate, plan_class_draws, EstimateMode, TtmaConfig};
use crate::types::{Dataset, Method, UncertaintyRecord};

/// `1 - u·v / (‖u‖‖v‖)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu2: f64 = u.iter().map(|a| a * a).sum();
    let nv2: f64 = v.iter().map(|b| b * b).sum();
    if nu2 == 0.0 || nv2 == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    Ok((1.0 - dot / (nu2 * nv2).sqrt()).clamp(0.0, 2.0))
}

/// Mean cosine distance between the features of `x_test` and of each partner.
pub fn average_feature_distance<P: Predictor + ?Sized>(
    f: &P,
    x_test: &[f64],
    partners: &[&[f64]],
) -> Result<f64> {
    if partners.is_empty() {
        return Err(Error::InvalidArgument("no partner samples".into()));
    }
    let v_test = f.features(x_test)?;
    let mut total = 0.0;
    for p in partners {
        total += cosine_distance(v_test.values(), f.features(p)?.values())?;
    }
    Ok(total / partners.len() as f64)
}

/// Feature distance from `x_test` to class `class_j`, over the same K
/// partners that the class-dependent estimate draws for this sample.
pub fn afd<P: Predictor + ?Sized>(
    x_test: &[f64],
    sample_id: u64,
    class_j: usize,
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
) -> Result<f64> {
    cfg.validate()?;
    let draws = plan_class_draws(sample_id, class_j, train, cfg)?;
    let partners: Vec<&[f64]> = draws
        .iter()
        .map(|d| train.sample(d.partner_pos).data.as_slice())
        .collect();
    average_feature_distance(f, x_test, &partners)
}

/// Five-number summary plus mean. Quartiles interpolate linearly between
/// order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipCell {
    pub test_class: usize,
    pub partner_class: usize,
    pub cdu: Summary,
    pub afd: Summary,
}

/// CDU and AFD statistics per (true test class, partner class). Cells with no
/// test samples are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRelationshipMatrix {
    pub class_count: usize,
    pub cells: Vec<RelationshipCell>,
}

impl ClassRelationshipMatrix {
    /// Aggregates class-dependent records that carry a partner class and a
    /// feature distance. Other records are ignored.
    pub fn from_records(records: &[UncertaintyRecord], class_count: usize) -> Result<Self> {
        let mut groups: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.method == Method::TtmaCdu) {
            let (Some(j), Some(afd)) = (r.partner_class, r.afd) else {
                continue;
            };
            if r.true_class >= class_count || j >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: r.true_class.max(j),
                    classes: class_count,
                });
            }
            let entry = groups.entry((r.true_class, j)).or_default();
            entry.0.push(r.uncertainty);
            entry.1.push(afd);
        }
        if groups.is_empty() {
            return Err(Error::EmptyRecords);
        }
        let cells = groups
            .into_iter()
            .map(|((test_class, partner_class), (cdu, afd))| RelationshipCell {
                test_class,
                partner_class,
                cdu: Summary::of(&cdu).expect("non-empty group"),
                afd: Summary::of(&afd).expect("non-empty group"),
            })
            .collect();
        Ok(Self { class_count, cells })
    }

    pub fn cell(&self, test_class: usize, partner_class: usize) -> Option<&RelationshipCell> {
        self.cells
            .iter()
            .find(|c| c.test_class == test_class && c.partner_class == partner_class)
    }

    pub fn default_thresholds(&self) -> RelationshipThresholds {
        let mut off: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.test_class != c.partner_class)
            .map(|c| c.afd.median)
            .collect();
        off.sort_by(f64::total_cmp);
        let afd_low = if off.is_empty() {
            0.0
        } else {
            quantile(&off, 0.25)
        };
        RelationshipThresholds {
            afd_low,
            cdu_high: 0.5 * (self.class_count as f64).ln(),
        }
    }

    /// Off-diagonal cells labelled with [`classify_relationship`].
    pub fn classify(&self, t: &RelationshipThresholds) -> Vec<(usize, usize, Relationship)> {
        self.cells
            .iter()
            .filter(|c| c.test_class != c.partner_class)
            .map(|c| {
                (
                    c.test_class,
                    c.partner_class,
                    classify_relationship(c.cdu.median, c.afd.median, t.afd_low, t.cdu_high),
                )
            })
            .collect()
    }

    /// Grid CSV: one row per test class, one column per partner class, cells
    /// `median_cdu|median_afd` (empty when no samples).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("test_class".to_string())
            .chain((0..self.class_count).map(|j| format!("partner_{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.class_count {
            let mut row = vec![i.to_string()];
            for j in 0..self.class_count {
                row.push(
                    self.cell(i, j)
                        .map(|c| format!("{}|{}", c.cdu.median, c.afd.median))
                        .unwrap_or_default(),
                );
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs class-dependent estimation with feature distances for every test
/// sample and partner class, then aggregates.
pub fn build_relationship_matrix<P: Predictor + ?Sized>(
    test: &Dataset,
    train: &Dataset,
    f: &P,
    cfg: &TtmaConfig,
) -> Result<ClassRelationshipMatrix> {
    let records = batch_estimate(test, train, f, cfg, EstimateMode::CduAllClasses)?;
    ClassRelationshipMatrix::from_records(&records, train.class_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationshipThresholds {
    pub afd_low: f64,
    pub cdu_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relationship {
    Confusion,
    Similarity,
    Unrelated,
}

/// Low distance with high uncertainty is confusion, low distance with low
/// uncertainty is similarity, anything far is unrelated.
pub fn classify_relationship(
    cdu_median: f64,
    afd_median: f64,
    afd_low_threshold: f64,
    cdu_high_threshold: f64,
) -> Relationship {
    if afd_median > afd_low_threshold {
        Relationship::Unrelated
    } else if cdu_median >= cdu_high_threshold {
        Relationship::Confusion
    } else {
        Relationship::Similarity
    }
}
