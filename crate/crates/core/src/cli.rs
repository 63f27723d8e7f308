//! The `uq` command-line interface.
//!
//! ```text
//! uq [--config FILE] [--seed N] [--workers N] gen      [--out DIR]
//! uq [--config FILE] [--seed N] [--workers N] train    [--out WEIGHTS]
//! uq [--config FILE] [--seed N] [--workers N] estimate --method LIST [--out CSV]
//! uq [--config FILE]                          report   RECORDS --kind KIND [--out DIR]
//! ```
//!
//! Every command prints the fully resolved configuration as JSON on stdout.
//!
//! # Files
//!
//! * `gen` writes `train.manifest`, `test.manifest`, their `.bin` blobs, and
//!   `train_labels.csv` / `test_labels.csv` into the dataset directory. The
//!   directory must already exist.
//! * `train` writes the weight file.
//! * `estimate` writes the records CSV, one row per record:
//!   `sample_id,method,partner_class,predicted_class,true_class,uncertainty,normalized_uncertainty,confidence,afd`.
//!   `method` is one of `ttma_du`, `ttma_cdu`, `tta`, `mcdo`, `single`;
//!   `partner_class` and `afd` are filled only for `ttma_cdu`, which has one
//!   row per (test sample, partner class).
//! * `report --kind curve` writes `curve.csv`: `method,rate,accuracy,retained`.
//! * `report --kind ece` writes `calibration.csv`
//!   (`method,bin,lo,hi,mean_confidence,accuracy,count`) and `ece.json`.
//! * `report --kind hist` writes `histograms.csv`:
//!   `method,bin_lo,bin_hi,correct_count,incorrect_count`.
//! * `report --kind matrix` writes `matrix.csv` (grid of
//!   `median_cdu|median_afd`) and `matrix.json` with the full summaries,
//!   thresholds, and relationship labels.
//! * `report --kind summary` writes `summary.json`: per-method accuracy, ECE,
//!   curve, calibration, and histograms plus the config echo.
//!
//! Confidence is the vote share of the predicted class for voted methods and
//! the maximum softmax probability for `single`.
//!
//! # Exit codes
//!
//! `0` success, `2` usage or configuration error, `3` I/O or malformed data,
//! `4` numeric failure (divergence, non-finite values, λ underflow).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::baselines::batch_baseline;
use crate::class_analysis::{ClassRelationshipMatrix, RelationshipThresholds};
use crate::config::AppConfig;
use crate::dataset::{export_labels_csv, generate_synthetic, load_dataset, save_dataset, split};
use crate::error::{Error, Result};
use crate::evaluation::{summarize, MethodSummary};
use crate::predictor::{accuracy, train_reference, Mlp, Predictor};
use crate::records::{read_records_file, write_records_file};
use crate::ttma::{batch_estimate, EstimateMode};
use crate::types::{Dataset, Method, UncertaintyRecord};

pub const CONFIDENCE_DEFINITION: &str =
    "vote share of the predicted class for voted methods; max softmax probability for single";

#[derive(Debug, Parser)]
#[command(name = "uq", version, about = "Test-time mixup uncertainty experiments")]
pub struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the batch estimators.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test split.
    Gen {
        /// Output directory (default: dataset.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reference classifier.
    Train {
        /// Weight file (default: train.weights).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate uncertainty on the test split.
    Estimate {
        /// Comma-separated: ttma-du, ttma-cdu, tta, mcdo, single.
        #[arg(long, value_delimiter = ',', required = true)]
        method: Vec<Method>,
        /// Records CSV (default: eval.records).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a records CSV.
    Report {
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportKind::Summary)]
        kind: ReportKind,
        /// Output directory (default: eval.report_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Curve,
    Ece,
    Hist,
    Matrix,
    Summary,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::InvalidSpec(_)
        | Error::Config(_)
        | Error::EmptyRecords
        | Error::ClassTooSmall { .. }
        | Error::InsufficientSamples { .. } => 2,
        Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::UnreadableBlob { .. }
        | Error::Manifest(_)
        | Error::WeightFormat(_)
        | Error::ShapeMismatch { .. }
        | Error::LabelOutOfRange { .. } => 3,
        Error::EmptyHistogram
        | Error::NonFiniteScore
        | Error::TrainingDiverged { .. }
        | Error::LambdaUnderflow { .. }
        | Error::DegenerateFeature => 4,
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("uq: {e}");
            exit_code(&e)
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => {
            let mut cfg = AppConfig::from_toml_str("", std::env::vars())?;
            cfg.resolve_paths(Path::new("."));
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Gen { out } => cmd_gen(&cfg, out.as_deref()),
        Command::Train { out } => cmd_train(&cfg, out.as_deref()),
        Command::Estimate { method, out } => cmd_estimate(&cfg, method, out.as_deref()),
        Command::Report { records, kind, out } => cmd_report(&cfg, records, *kind, out.as_deref()),
    })
}

fn echo(value: &serde_json::Value) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

pub fn cmd_gen(cfg: &AppConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.dataset.dir);
    let spec = cfg.synthetic_spec()?;
    let full = generate_synthetic(&spec)?;
    let (train, test) = split(&full, cfg.dataset.test_fraction, cfg.seed)?;
    let train_manifest = dir.join("train.manifest");
    let test_manifest = dir.join("test.manifest");
    save_dataset(&train, &train_manifest)?;
    save_dataset(&test, &test_manifest)?;
    export_labels_csv(&train, &dir.join("train_labels.csv"))?;
    export_labels_csv(&test, &dir.join("test_labels.csv"))?;
    log::info!("wrote {} train and {} test samples to {}", train.len(), test.len(), dir.display());
    echo(&json!({
        "command": "gen",
        "config": cfg,
        "spec": spec,
        "train": { "manifest": train_manifest, "samples": train.len() },
        "test": { "manifest": test_manifest, "samples": test.len() },
    }))
}

pub fn cmd_train(cfg: &AppConfig, out: Option<&Path>) -> Result<()> {
    let weights = out.unwrap_or(&cfg.train.weights);
    let train = load_dataset(&cfg.train_manifest())?;
    let model = train_reference(&train, &cfg.train_config())?;
    model.save(weights)?;
    let train_acc = accuracy(&model, &train)?;
    let test_acc = match load_dataset(&cfg.test_manifest()) {
        Ok(test) => Some(accuracy(&model, &test)?),
        Err(_) => None,
    };
    log::info!("train accuracy {train_acc:.4}");
    echo(&json!({
        "command": "train",
        "config": cfg,
        "weights": weights,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
    }))
}

fn check_compatible(model: &Mlp, train: &Dataset, test: &Dataset) -> Result<()> {
    for ds in [train, test] {
        if model.input_len() != ds.shape().len() {
            return Err(Error::ShapeMismatch {
                expected: model.input_len(),
                found: ds.shape().len(),
            });
        }
        if model.class_count() != ds.class_count() {
            return Err(Error::LabelOutOfRange {
                label: ds.class_count() - 1,
                classes: model.class_count(),
            });
        }
    }
    Ok(())
}

/// Runs the requested estimators in order, skipping repeats.
pub fn estimate_records(
    cfg: &AppConfig,
    methods: &[Method],
    train: &Dataset,
    test: &Dataset,
    model: &Mlp,
) -> Result<Vec<UncertaintyRecord>> {
    let ttma = cfg.ttma_config();
    let baselines = cfg.baseline_config();
    let mut seen = Vec::new();
    let mut records = Vec::new();
    for &m in methods {
        if seen.contains(&m) {
            continue;
        }
        seen.push(m);
        let batch = match m {
            Method::TtmaDu => batch_estimate(test, train, model, &ttma, EstimateMode::Du)?,
            Method::TtmaCdu => {
                batch_estimate(test, train, model, &ttma, EstimateMode::CduAllClasses)?
            }
            other => batch_baseline(test, model, &baselines, other)?,
        };
        log::info!("{m}: {} records", batch.len());
        records.extend(batch);
    }
    Ok(records)
}

pub fn cmd_estimate(cfg: &AppConfig, methods: &[Method], out: Option<&Path>) -> Result<()> {
    let path = out.unwrap_or(&cfg.eval.records);
    let train = load_dataset(&cfg.train_manifest())?;
    let test = load_dataset(&cfg.test_manifest())?;
    let model = Mlp::load(&cfg.train.weights)?;
    check_compatible(&model, &train, &test)?;
    let records = estimate_records(cfg, methods, &train, &test, &model)?;
    write_records_file(path, &records)?;
    let counts: Vec<_> = Method::ALL
        .iter()
        .filter_map(|m| {
            let n = records.iter().filter(|r| r.method == *m).count();
            (n > 0).then(|| json!({ "method": m, "rows": n }))
        })
        .collect();
    echo(&json!({
        "command": "estimate",
        "config": cfg,
        "records": path,
        "methods": counts,
    }))
}

/// The `summary.json` document: ECE per method, full per-method summaries,
/// the confidence definition, and the config echo.
pub fn summary_json(cfg: &AppConfig, summaries: &[MethodSummary]) -> serde_json::Value {
    let ece: serde_json::Map<String, serde_json::Value> = summaries
        .iter()
        .map(|s| (s.method.to_string(), json!(s.calibration.ece)))
        .collect();
    json!({
        "confidence": CONFIDENCE_DEFINITION,
        "config": cfg,
        "ece": ece,
        "methods": summaries,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(File::create(path)?))
}

pub fn cmd_report(
    cfg: &AppConfig,
    records_path: &Path,
    kind: ReportKind,
    out: Option<&Path>,
) -> Result<()> {
    let dir = out.unwrap_or(&cfg.eval.report_dir);
    let records = read_records_file(records_path)?;
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let eval = cfg.eval_config();
    let mut written: Vec<PathBuf> = Vec::new();

    match kind {
        ReportKind::Matrix => {
            let class_count = records
                .iter()
                .filter_map(|r| r.partner_class.map(|j| j.max(r.true_class) + 1))
                .max()
                .ok_or(Error::EmptyRecords)?;
            let matrix = ClassRelationshipMatrix::from_records(&records, class_count)?;
            let defaults = matrix.default_thresholds();
            let thresholds = RelationshipThresholds {
                afd_low: cfg.eval.afd_low.unwrap_or(defaults.afd_low),
                cdu_high: cfg.eval.cdu_high.unwrap_or(defaults.cdu_high),
            };
            let relationships: Vec<_> = matrix
                .classify(&thresholds)
                .into_iter()
                .map(|(i, j, rel)| json!({ "test_class": i, "partner_class": j, "relationship": rel }))
                .collect();
            let csv_path = dir.join("matrix.csv");
            let mut w = BufWriter::new(File::create(&csv_path)?);
            matrix.write_csv(&mut w)?;
            w.flush()?;
            let json_path = dir.join("matrix.json");
            write_json(
                &json_path,
                &json!({
                    "matrix": matrix,
                    "thresholds": thresholds,
                    "relationships": relationships,
                }),
            )?;
            written.extend([csv_path, json_path]);
        }
        _ => {
            let summaries = summarize(&records, &eval)?;
            match kind {
                ReportKind::Curve => {
                    let path = dir.join("curve.csv");
                    let mut w = csv_writer(&path)?;
                    w.write_record(["method", "rate", "accuracy", "retained"])?;
                    for s in &summaries {
                        for p in &s.curve.points {
                            w.write_record([
                                s.method.to_string(),
                                p.rate.to_string(),
                                p.accuracy.to_string(),
                                p.retained.to_string(),
                            ])?;
                        }
                    }
                    w.flush()?;
                    written.push(path);
                }
                ReportKind::Ece => {
                    let path = dir.join("calibration.csv");
                    let mut w = csv_writer(&path)?;
                    w.write_record([
                        "method",
                        "bin",
                        "lo",
                        "hi",
                        "mean_confidence",
                        "accuracy",
                        "count",
                    ])?;
                    for s in &summaries {
                        for (i, b) in s.calibration.bins.iter().enumerate() {
                            w.write_record([
                                s.method.to_string(),
                                i.to_string(),
                                b.lo.to_string(),
                                b.hi.to_string(),
                                b.mean_confidence.to_string(),
                                b.accuracy.to_string(),
                                b.count.to_string(),
                            ])?;
                        }
                    }
                    w.flush()?;
                    let json_path = dir.join("ece.json");
                    let methods: Vec<_> = summaries
                        .iter()
                        .map(|s| {
                            json!({
                                "method": s.method,
                                "ece": s.calibration.ece,
                                "bins": s.calibration.bins,
                            })
                        })
                        .collect();
                    write_json(
                        &json_path,
                        &json!({ "confidence": CONFIDENCE_DEFINITION, "methods": methods }),
                    )?;
                    written.extend([path, json_path]);
                }
                ReportKind::Hist => {
                    let path = dir.join("histograms.csv");
                    let mut w = csv_writer(&path)?;
                    w.write_record(["method", "bin_lo", "bin_hi", "correct_count", "incorrect_count"])?;
                    for s in &summaries {
                        for b in &s.histograms.bins {
                            w.write_record([
                                s.method.to_string(),
                                b.lo.to_string(),
                                b.hi.to_string(),
                                b.correct.to_string(),
                                b.incorrect.to_string(),
                            ])?;
                        }
                    }
                    w.flush()?;
                    written.push(path);
                }
                ReportKind::Summary => {
                    let path = dir.join("summary.json");
                    write_json(&path, &summary_json(cfg, &summaries))?;
                    written.push(path);
                }
                ReportKind::Matrix => unreachable!("handled above"),
            }
        }
    }
    echo(&json!({
        "command": "report",
        "config": cfg,
        "records": records_path,
        "written": written,
    }))
}
