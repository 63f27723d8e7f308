//! Experiment configuration: a TOML file with `[dataset]`, `[train]`,
//! `[ttma]`, `[baselines]`, and `[eval]` sections plus a top-level `seed`.
//! Every key has a default. Environment variables `UQ_<SECTION>_<KEY>`
//! (or `UQ_SEED`) override file values; relative paths resolve against the
//! config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{AffineConfig, DEFAULT_LAMBDA_MIN};
use crate::baselines::{BaselineConfig, DEFAULT_PASSES};
use crate::dataset::{Preset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{default_rejection_rates, EvalConfig};
use crate::predictor::TrainConfig;
use crate::ttma::TtmaConfig;

const SECTIONS: [&str; 5] = ["dataset", "train", "ttma", "baselines", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub ttma: TtmaSection,
    pub baselines: BaselineSection,
    pub eval: EvalSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            ttma: TtmaSection::default(),
            baselines: BaselineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub preset: String,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub test_fraction: f64,
    /// Directory holding `train.manifest` and `test.manifest`.
    pub dir: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            preset: "confusion-similarity".into(),
            classes: 4,
            dim: 2,
            samples_per_class: 300,
            test_fraction: 0.25,
            dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub mixup_alpha: f64,
    pub dropout: f64,
    pub hidden: Vec<usize>,
    pub weights: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            mixup_alpha: t.mixup_alpha,
            dropout: t.dropout,
            hidden: t.hidden,
            weights: PathBuf::from("model.weights"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtmaSection {
    pub alpha: f64,
    pub k: usize,
    pub lambda_min: f64,
    pub allow_replacement: bool,
}

impl Default for TtmaSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k: 30,
            lambda_min: DEFAULT_LAMBDA_MIN,
            allow_replacement: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub tta_passes: usize,
    pub mcdo_passes: usize,
    pub mcdo_dropout: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotation_deg: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_sigma: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let a = AffineConfig::default();
        Self {
            tta_passes: DEFAULT_PASSES,
            mcdo_passes: DEFAULT_PASSES,
            mcdo_dropout: 0.5,
            horizontal_flip: a.horizontal_flip,
            vertical_flip: a.vertical_flip,
            rotation_deg: a.rotation_deg,
            translate_x: a.translate_x,
            translate_y: a.translate_y,
            scale_min: a.scale_min,
            scale_max: a.scale_max,
            jitter_sigma: a.jitter_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ece_bins: usize,
    pub hist_bin_width: f64,
    pub rejection_rates: Vec<f64>,
    /// Relationship thresholds; unset means "derive from the matrix".
    pub afd_low: Option<f64>,
    pub cdu_high: Option<f64>,
    /// Default records CSV written by `estimate` and read by `report`.
    pub records: PathBuf,
    /// Default directory for report files.
    pub report_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ece_bins: 10,
            hist_bin_width: 0.1,
            rejection_rates: default_rejection_rates(),
            afd_low: None,
            cdu_high: None,
            records: PathBuf::from("records.csv"),
            report_dir: PathBuf::from("."),
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `UQ_*` overrides from `vars` onto a parsed table.
fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with("UQ_"))
        .collect();
    vars.sort();
    for (name, raw) in vars {
        let key = name["UQ_".len()..].to_ascii_lowercase();
        if key == "seed" {
            table.insert(key, parse_env_value(&raw));
            continue;
        }
        let Some(section) = SECTIONS
            .iter()
            .find(|s| key.starts_with(&format!("{s}_")))
        else {
            // not ours, e.g. UQ_LOG
            continue;
        };
        let field = &key[section.len() + 1..];
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(t) = entry else {
            return Err(Error::Config(format!("'{section}' is not a section")));
        };
        t.insert(field.to_string(), parse_env_value(&raw));
    }
    Ok(())
}

impl AppConfig {
    pub fn from_toml_str<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, env)?;
        let cfg: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies process environment overrides, and
    /// resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, std::env::vars())?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.dataset.dir,
            &mut self.train.weights,
            &mut self.eval.records,
            &mut self.eval.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset()?;
        self.train_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.ttma_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.affine_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.dataset;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config("dataset.test_fraction must lie in (0, 1)".into()));
        }
        if d.classes < 2 || d.dim == 0 || d.samples_per_class < 2 {
            return Err(Error::Config(
                "dataset needs classes >= 2, dim >= 1, samples_per_class >= 2".into(),
            ));
        }
        let b = &self.baselines;
        if b.tta_passes == 0 || b.mcdo_passes == 0 || !(0.0..1.0).contains(&b.mcdo_dropout) {
            return Err(Error::Config(
                "baselines need positive pass counts and mcdo_dropout in [0, 1)".into(),
            ));
        }
        if self.eval.ece_bins == 0 || !(self.eval.hist_bin_width > 0.0) {
            return Err(Error::Config("eval needs ece_bins >= 1 and hist_bin_width > 0".into()));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        self.dataset
            .preset
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let d = &self.dataset;
        Ok(self
            .preset()?
            .spec(d.classes, d.dim, d.samples_per_class, self.seed))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_milestones: t.lr_milestones.clone(),
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            mixup_alpha: t.mixup_alpha,
            dropout: t.dropout,
            hidden: t.hidden.clone(),
            seed: self.seed,
        }
    }

    pub fn ttma_config(&self) -> TtmaConfig {
        let t = &self.ttma;
        TtmaConfig {
            alpha: t.alpha,
            k: t.k,
            lambda_min: t.lambda_min,
            seed: self.seed,
            allow_replacement: t.allow_replacement,
            fixed_lambda: None,
        }
    }

    pub fn affine_config(&self) -> AffineConfig {
        let b = &self.baselines;
        AffineConfig {
            horizontal_flip: b.horizontal_flip,
            vertical_flip: b.vertical_flip,
            rotation_deg: b.rotation_deg,
            translate_x: b.translate_x,
            translate_y: b.translate_y,
            scale_min: b.scale_min,
            scale_max: b.scale_max,
            jitter_sigma: b.jitter_sigma,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            tta_passes: self.baselines.tta_passes,
            mcdo_passes: self.baselines.mcdo_passes,
            mcdo_dropout: self.baselines.mcdo_dropout,
            affine: self.affine_config(),
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ece_bins: self.eval.ece_bins,
            hist_bin_width: self.eval.hist_bin_width,
            rejection_rates: self.eval.rejection_rates.clone(),
        }
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.dataset.dir.join("train.manifest")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.dataset.dir.join("test.manifest")
    }
}
