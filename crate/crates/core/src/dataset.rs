//! Synthetic Gaussian-class datasets, the on-disk manifest format, and
//! stratified splitting.
//!
//! Manifest layout (UTF-8 text):
//!
//! ```text
//! uq-dataset v1
//! blob = train.bin
//! modality = vector
//! shape = 8
//! classes = 4
//! samples = 400
//! id,offset,label
//! 0,0,2
//! ...
//! ```
//!
//! `shape` is `D` for vectors and `WxHxC` for images. The blob path is
//! relative to the manifest's directory and holds little-endian `f32` values,
//! `shape` values per sample starting at the row's byte offset.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::types::{Dataset, LabeledSample, Modality, Shape, SoftLabel};

const MANIFEST_MAGIC: &str = "uq-dataset v1";
const ROW_HEADER: &str = "id,offset,label";

/// Isotropic Gaussian classes: class `c` draws `mean[c] + scale[c] * N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub shape: Shape,
    pub means: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.means.len() != self.class_count || self.scales.len() != self.class_count {
            return Err(Error::InvalidSpec(format!(
                "{} classes but {} means and {} scales",
                self.class_count,
                self.means.len(),
                self.scales.len()
            )));
        }
        let dim = self.shape.len();
        if dim == 0 {
            return Err(Error::InvalidSpec("zero-sized sample shape".into()));
        }
        for (c, m) in self.means.iter().enumerate() {
            if m.len() != dim {
                return Err(Error::InvalidSpec(format!(
                    "mean of class {c} has dim {}, expected {dim}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("mean of class {c} is not finite")));
            }
        }
        if let Some(c) = self
            .scales
            .iter()
            .position(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidSpec(format!(
                "scale of class {c} must be positive"
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidSpec("samples_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Named geometry presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Well-separated classes on a circle.
    Blobs,
    /// Four classes A, B, C, D: A and B overlap, C sits near A but apart,
    /// D is far from all.
    ConfusionSimilarity,
    /// Classes on a circle with enough overlap that a good classifier still
    /// errs on roughly 15% of samples.
    NoisyOverlap,
    /// 8x8 single-channel images, one bright patch location per class.
    ImageBlobs,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Preset::Blobs),
            "confusion-similarity" => Ok(Preset::ConfusionSimilarity),
            "noisy-overlap" => Ok(Preset::NoisyOverlap),
            "image-blobs" => Ok(Preset::ImageBlobs),
            other => Err(Error::InvalidSpec(format!("unknown preset '{other}'"))),
        }
    }
}

/// Class indices of the confusion-similarity preset.
pub mod roles {
    pub const A: usize = 0;
    pub const B: usize = 1;
    pub const C: usize = 2;
    pub const D: usize = 3;
}

/// Input dimension of the confusion-similarity preset.
const CONFUSION_DIM: usize = 4;

/// Radius of the class circle in the noisy-overlap preset.
const NOISY_OVERLAP_RADIUS: f64 = 2.0;

fn circle_means(class_count: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..class_count)
        .map(|c| {
            let theta = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * theta.cos();
            if dim > 1 {
                m[1] = radius * theta.sin();
            }
            m
        })
        .collect()
}

impl Preset {
    /// Builds the spec for this preset. `class_count` and `dim` are ignored
    /// where the preset fixes them (confusion-similarity has four classes in
    /// four dimensions, image-blobs is 8x8x1 with four classes).
    pub fn spec(
        &self,
        class_count: usize,
        dim: usize,
        samples_per_class: usize,
        seed: u64,
    ) -> SyntheticSpec {
        match self {
            Preset::Blobs => SyntheticSpec {
                class_count,
                shape: Shape::Vector { dim },
                means: circle_means(class_count, dim.max(1), 5.0),
                scales: vec![1.0; class_count],
                samples_per_class,
                seed,
            },
            Preset::NoisyOverlap => SyntheticSpec {
                class_count,
                shape: Shape::Vector { dim },
                means: circle_means(class_count, dim.max(1), NOISY_OVERLAP_RADIUS),
                scales: vec![1.0; class_count],
                samples_per_class,
                seed,
            },
            Preset::ConfusionSimilarity => {
                // A tight at the origin, B broad and overlapping it, C a
                // separate tight cluster nearby, D tight and far away
                let dim = CONFUSION_DIM;
                let mut means = vec![vec![0.0; dim]; 4];
                means[roles::B][0] = 0.5;
                means[roles::C][1] = 3.0;
                let d = 15.0 / 2f64.sqrt();
                means[roles::D][0] = -d;
                means[roles::D][1] = -d;
                let mut scales = vec![0.5; 4];
                scales[roles::B] = 4.0;
                SyntheticSpec {
                    class_count: 4,
                    shape: Shape::Vector { dim },
                    means,
                    scales,
                    samples_per_class,
                    seed,
                }
            }
            Preset::ImageBlobs => {
                let (w, h) = (8usize, 8usize);
                let centers = [(2.0, 2.0), (5.0, 2.0), (2.0, 5.0), (5.0, 5.0)];
                let means = centers
                    .iter()
                    .map(|&(cx, cy)| {
                        let mut img = vec![0.0; w * h];
                        for y in 0..h {
                            for x in 0..w {
                                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                                img[y * w + x] = (-d2 / 2.0).exp();
                            }
                        }
                        img
                    })
                    .collect();
                SyntheticSpec {
                    class_count: 4,
                    shape: Shape::Image {
                        width: w,
                        height: h,
                        channels: 1,
                    },
                    means,
                    scales: vec![0.15; 4],
                    samples_per_class,
                    seed,
                }
            }
        }
    }
}

/// Draws `samples_per_class` samples per class, class-major with ids
/// `0..M·n`. Values are rounded to `f32` precision so that datasets survive a
/// round-trip through the manifest blob unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let m = spec.class_count;
    let n = spec.samples_per_class;
    let mut samples = Vec::with_capacity(m * n);
    for c in 0..m {
        let mut rng = RngStream::for_purpose(spec.seed, Purpose::Dataset, 0, c);
        let label = SoftLabel::one_hot(c, m)?;
        for i in 0..n {
            let data = spec.means[c]
                .iter()
                .map(|&mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (mu + spec.scales[c] * z) as f32 as f64
                })
                .collect();
            samples.push(LabeledSample {
                id: (c * n + i) as u64,
                data,
                label: label.clone(),
            });
        }
    }
    Dataset::new(samples, m, spec.shape)
}

/// Stratified split. Each class contributes `round(n_c · test_fraction)`
/// samples to the test side, clamped so both sides keep at least one.
/// Within each side, the original sample order is preserved.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut is_test = vec![false; ds.len()];
    for c in 0..ds.class_count() {
        let members = ds.class_members(c);
        if members.len() < 2 {
            return Err(Error::ClassTooSmall {
                class: c,
                count: members.len(),
            });
        }
        let n_test = ((members.len() as f64 * test_fraction).round() as usize)
            .clamp(1, members.len() - 1);
        let mut shuffled = members.to_vec();
        let mut rng = RngStream::for_purpose(seed, Purpose::Split, 0, c);
        shuffled.shuffle(&mut rng);
        for &p in &shuffled[..n_test] {
            is_test[p] = true;
        }
    }
    let (test_pos, train_pos): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&p| is_test[p]);
    Ok((ds.subset(&train_pos)?, ds.subset(&test_pos)?))
}

/// Parsed manifest: header plus one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub blob: PathBuf,
    pub shape: Shape,
    pub class_count: usize,
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: u64,
    pub offset: u64,
    pub label: usize,
}

fn parse_shape(modality: &str, shape: &str) -> Result<Shape> {
    let dims: Vec<usize> = shape
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Manifest(format!("bad shape '{shape}'")))?;
    match (modality, dims.as_slice()) {
        ("vector", [dim]) => Ok(Shape::Vector { dim: *dim }),
        ("image", [width, height, channels]) => Ok(Shape::Image {
            width: *width,
            height: *height,
            channels: *channels,
        }),
        _ => Err(Error::Manifest(format!(
            "shape '{shape}' does not fit modality '{modality}'"
        ))),
    }
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => return Err(Error::Manifest(format!("{} lacks header", path.display()))),
        }
        let mut header = HashMap::new();
        for line in lines.by_ref() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == ROW_HEADER {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("bad header line '{line}'")))?;
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            header
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Manifest(format!("missing header key '{k}'")))
        };
        let shape = parse_shape(get("modality")?, get("shape")?)?;
        let class_count: usize = get("classes")?
            .parse()
            .map_err(|_| Error::Manifest("bad class count".into()))?;
        let declared: usize = get("samples")?
            .parse()
            .map_err(|_| Error::Manifest("bad sample count".into()))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let blob = dir.join(get("blob")?);

        let mut rows = Vec::with_capacity(declared);
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Manifest(format!("bad row '{line}'")))
            };
            if fields.len() != 3 {
                return Err(Error::Manifest(format!("bad row '{line}'")));
            }
            rows.push(ManifestRow {
                id: parse(fields[0])?,
                offset: parse(fields[1])?,
                label: parse(fields[2])? as usize,
            });
        }
        if rows.len() != declared {
            return Err(Error::Manifest(format!(
                "header declares {declared} samples, found {} rows",
                rows.len()
            )));
        }
        Ok(Self {
            blob,
            shape,
            class_count,
            rows,
        })
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let blob = fs::read(&manifest.blob).map_err(|source| Error::UnreadableBlob {
        path: manifest.blob.clone(),
        source,
    })?;
    let len = manifest.shape.len();
    let record_bytes = len * 4;
    let mut samples = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        if row.label >= manifest.class_count {
            return Err(Error::LabelOutOfRange {
                label: row.label,
                classes: manifest.class_count,
            });
        }
        let start = row.offset as usize;
        let bytes = blob.get(start..start + record_bytes).ok_or(Error::ShapeMismatch {
            expected: len,
            found: blob.len().saturating_sub(start) / 4,
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        samples.push(LabeledSample {
            id: row.id,
            data,
            label: SoftLabel::one_hot(row.label, manifest.class_count)?,
        });
    }
    Dataset::new(samples, manifest.class_count, manifest.shape)
}

/// Writes `<manifest_path>` and its blob (same stem, `.bin` extension).
pub fn save_dataset(ds: &Dataset, manifest_path: &Path) -> Result<()> {
    let blob_path = manifest_path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument("manifest path has no file name".into()))?
        .to_string_lossy()
        .into_owned();
    let shape = ds.shape();
    let mut blob = Vec::with_capacity(ds.len() * shape.len() * 4);
    let mut text = String::new();
    text.push_str(MANIFEST_MAGIC);
    text.push('\n');
    text.push_str(&format!("blob = {blob_name}\n"));
    let modality = match shape.modality() {
        Modality::Vector => "vector",
        Modality::Image => "image",
    };
    text.push_str(&format!("modality = {modality}\n"));
    text.push_str(&format!("shape = {shape}\n"));
    text.push_str(&format!("classes = {}\n", ds.class_count()));
    text.push_str(&format!("samples = {}\n", ds.len()));
    text.push_str(ROW_HEADER);
    text.push('\n');
    for s in ds.samples() {
        text.push_str(&format!("{},{},{}\n", s.id, blob.len(), s.class()));
        for &v in &s.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(&blob_path, &blob)?;
    let mut f = fs::File::create(manifest_path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// `id,label` CSV for quick inspection.
pub fn export_labels_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label"])?;
    for s in ds.samples() {
        w.write_record([s.id.to_string(), s.class().to_string()])?;
    }
    w.flush()?;
    Ok(())
}
