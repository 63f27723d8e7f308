//! Acceptance suite. Each criterion prints one PASS/FAIL line; the run
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttma::augmentation::AffineConfig;
use ttma::baselines::{batch_baseline, mcdo_uncertainty, tta_uncertainty, BaselineConfig};
use ttma::class_analysis::ClassRelationshipMatrix;
use ttma::cli::summary_json;
use ttma::config::AppConfig;
use ttma::dataset::{generate_synthetic, roles, split, Preset};
use ttma::error::Result;
use ttma::evaluation::{accuracy_rejection_curve, default_rejection_rates, ece, summarize, EvalConfig};
use ttma::predictor::{train_reference, FeatureVector};
use ttma::ttma::{batch_estimate, infer_test_label, run_cdu, run_du, EstimateMode};
use ttma::types::{LabeledSample, Shape};
use ttma::{
    entropy, Dataset, Method, Mlp, Predictor, RngStream, SoftLabel, TrainConfig, TtmaConfig,
    UncertaintyRecord, VoteHistogram,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn oracle_entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n as f64;
            h -= p * p.ln();
        }
    }
    h
}

fn oracle_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn c1_entropy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=10);
        let total = rng.random_range(1..=100u64);
        let mut counts = vec![0u64; m];
        for _ in 0..total {
            counts[rng.random_range(0..m)] += 1;
        }
        let h = entropy(&VoteHistogram::from_counts(counts.clone())).unwrap();
        worst = worst.max((h - oracle_entropy(&counts)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("max |err| {worst:.2e}, {elapsed:.2?}"),
    )
}

fn c2_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut argmax_ok = true;
    for _ in 0..1000 {
        let m = rng.random_range(2..=10);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(1e-6..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let pred = SoftLabel::new(raw.iter().map(|v| v / sum).collect());
        let y = SoftLabel::one_hot(rng.random_range(0..m), m).unwrap();
        let lambda = rng.random_range(0.05..=1.0);
        let inferred = infer_test_label(&pred, &y, lambda, 0.05).unwrap();
        for i in 0..m {
            let back = lambda * inferred.values()[i] + (1.0 - lambda) * y.values()[i];
            worst = worst.max((back - pred.values()[i]).abs());
        }
        let numerator: Vec<f64> = (0..m)
            .map(|i| pred.values()[i] - (1.0 - lambda) * y.values()[i])
            .collect();
        argmax_ok &= oracle_argmax(inferred.values()) == oracle_argmax(&numerator);
    }
    outcome(
        worst <= 1e-12 && argmax_ok,
        format!("max |err| {worst:.2e}, argmax agreement {argmax_ok}"),
    )
}

/// Softmax of a fixed linear map; enough to drive the pipeline.
struct LinearStub {
    classes: usize,
    dim: usize,
}

impl LinearStub {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (((c * 7 + i * 3) % 11) as f64 - 5.0) / 5.0)
                    .sum()
            })
            .collect()
    }
}

impl Predictor for LinearStub {
    fn class_count(&self) -> usize {
        self.classes
    }
    fn input_len(&self) -> usize {
        self.dim
    }
    fn predict(&self, x: &[f64]) -> Result<SoftLabel> {
        let l = self.logits(x);
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(SoftLabel::new(e.into_iter().map(|v| v / s).collect()))
    }
    fn features(&self, x: &[f64]) -> Result<FeatureVector> {
        Ok(FeatureVector(x.iter().map(|v| v.abs() + 1.0).collect()))
    }
    fn predict_stochastic(&self, x: &[f64], _: f64, _: &mut RngStream) -> Result<SoftLabel> {
        self.predict(x)
    }
}

fn grid_dataset(classes: usize, per_class: usize, dim: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = (0..classes * per_class)
        .map(|i| LabeledSample {
            id: i as u64,
            data: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: SoftLabel::one_hot(i / per_class, classes).unwrap(),
        })
        .collect();
    Dataset::new(samples, classes, Shape::Vector { dim }).unwrap()
}

fn c3_counts() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (m, k, per_class, expected) in [(7usize, 30usize, 30usize, 210usize), (100, 10, 10, 1000)] {
        let train = grid_dataset(m, per_class, 3);
        let f = LinearStub { classes: m, dim: 3 };
        let cfg = TtmaConfig {
            k,
            seed: 4,
            allow_replacement: false,
            ..TtmaConfig::default()
        };
        let out = run_du(&[0.3, -0.2, 0.9], 0, &train, &f, &cfg).unwrap();
        let got = out.labels.len();
        let total = out.vote.histogram.total() as usize;
        pass &= got == expected && total == expected;
        details.push(format!("M={m} K={k}: {got} labels"));
    }
    outcome(pass, details.join(", "))
}

fn trained_blobs() -> (Dataset, Dataset, Mlp) {
    let ds = generate_synthetic(&Preset::Blobs.spec(3, 2, 60, 11)).unwrap();
    let (train, test) = split(&ds, 0.25, 11).unwrap();
    let model = train_reference(
        &train,
        &TrainConfig {
            epochs: 40,
            seed: 11,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    (train, test, model)
}

fn c4_identity() -> Outcome {
    let (train, test, model) = trained_blobs();
    let cfg = TtmaConfig {
        k: 10,
        seed: 5,
        fixed_lambda: Some(1.0),
        ..TtmaConfig::default()
    };
    let mut failures = 0;
    for s in test.samples() {
        let expected = oracle_argmax(model.predict(&s.data).unwrap().values());
        let du = run_du(&s.data, s.id, &train, &model, &cfg).unwrap();
        let mut ok = du.vote.uncertainty == 0.0 && du.vote.predicted_class == expected;
        for j in 0..train.class_count() {
            let cdu = run_cdu(&s.data, s.id, j, &train, &model, &cfg).unwrap();
            ok &= cdu.vote.uncertainty == 0.0 && cdu.vote.predicted_class == expected;
        }
        let tta = tta_uncertainty(&s.data, s.id, test.shape(), &model, &AffineConfig::identity(), 30, 5)
            .unwrap();
        ok &= tta.uncertainty == 0.0 && tta.predicted_class == expected;
        let mcdo = mcdo_uncertainty(&s.data, s.id, &model, 0.0, 30, 5).unwrap();
        ok &= mcdo.uncertainty == 0.0 && mcdo.predicted_class == expected;
        if !ok {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{} test samples x 4 methods, {failures} failures", test.len()),
    )
}

fn c5_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let input = rng.random_range(1..=4);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(2..=6))
            .collect();
        let classes = rng.random_range(2..=4);
        let mut model = Mlp::new(input, &hidden, classes, 0.0, case);
        // random biases keep units away from the ReLU kink at zero
        let mut params = model.params();
        for p in params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        model.set_params(&params).unwrap();
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                let x = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                (x, raw.into_iter().map(|v| v / s).collect())
            })
            .collect();
        let (_, analytic) = model.batch_gradient(&batch);
        for i in 0..params.len() {
            let mut probe = model.clone();
            let mut p = params.clone();
            p[i] += h;
            probe.set_params(&p).unwrap();
            let up = probe.batch_loss(&batch);
            p[i] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let down = probe.batch_loss(&batch);
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over 20 networks"))
}

fn c6_relationship_signature() -> Outcome {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let matrix = pool.install(|| {
        let spec = Preset::ConfusionSimilarity.spec(4, 4, 400, 7);
        let ds = generate_synthetic(&spec).unwrap();
        let (train, test) = split(&ds, 0.25, 7).unwrap();
        let model = train_reference(
            &train,
            &TrainConfig {
                epochs: 200,
                seed: 7,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let cfg = TtmaConfig {
            k: 20,
            alpha: 0.2,
            seed: 7,
            ..TtmaConfig::default()
        };
        let min_per_class = (0..4).map(|c| test.class_members(c).len()).min().unwrap();
        assert!(min_per_class >= 100, "only {min_per_class} test samples per class");
        let records = batch_estimate(&test, &train, &model, &cfg, EstimateMode::CduAllClasses).unwrap();
        ClassRelationshipMatrix::from_records(&records, 4).unwrap()
    });
    let elapsed = start.elapsed();
    let cell = |j| matrix.cell(roles::A, j).unwrap();
    let (ab, ac, ad) = (cell(roles::B), cell(roles::C), cell(roles::D));
    let checks = [
        ab.cdu.median > ad.cdu.median,
        ab.afd.median < ad.afd.median,
        ac.cdu.median < ab.cdu.median,
        ac.afd.median < ad.afd.median,
    ];
    outcome(
        checks.iter().all(|c| *c) && elapsed < Duration::from_secs(120),
        format!(
            "CDU A->B {:.3} A->C {:.3} A->D {:.3}; AFD A->B {:.3} A->C {:.3} A->D {:.3}; {elapsed:.1?}",
            ab.cdu.median, ac.cdu.median, ad.cdu.median, ab.afd.median, ac.afd.median, ad.afd.median
        ),
    )
}

struct NoisyRun {
    test: Dataset,
    du: Vec<UncertaintyRecord>,
    others: Vec<UncertaintyRecord>,
}

fn noisy_overlap_run() -> NoisyRun {
    let spec = Preset::NoisyOverlap.spec(4, 2, 500, 7);
    let ds = generate_synthetic(&spec).unwrap();
    let (train, test) = split(&ds, 0.25, 7).unwrap();
    let model = train_reference(
        &train,
        &TrainConfig {
            seed: 7,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let ttma_cfg = TtmaConfig {
        seed: 7,
        ..TtmaConfig::default()
    };
    let du = batch_estimate(&test, &train, &model, &ttma_cfg, EstimateMode::Du).unwrap();
    let base = BaselineConfig {
        seed: 7,
        ..BaselineConfig::default()
    };
    let mut others = Vec::new();
    for m in [Method::Tta, Method::Mcdo, Method::Single] {
        others.extend(batch_baseline(&test, &model, &base, m).unwrap());
    }
    others.extend(batch_estimate(&test, &train, &model, &ttma_cfg, EstimateMode::CduAllClasses).unwrap());
    NoisyRun { test, du, others }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn c7_selective_prediction(run: &NoisyRun) -> Outcome {
    let single_err = run
        .others
        .iter()
        .filter(|r| r.method == Method::Single)
        .filter(|r| !r.is_correct())
        .count() as f64
        / run.test.len() as f64;
    let curve = accuracy_rejection_curve(&run.du, &default_rejection_rates()).unwrap();
    let a0 = curve.accuracy_at(0.0).unwrap();
    let a50 = curve.accuracy_at(0.5).unwrap();
    let u_ok = mean(run.du.iter().filter(|r| r.is_correct()).map(|r| r.uncertainty));
    let u_bad = mean(run.du.iter().filter(|r| !r.is_correct()).map(|r| r.uncertainty));
    outcome(
        (0.10..=0.20).contains(&single_err) && a50 >= a0 + 0.03 && u_bad > u_ok,
        format!(
            "error rate {single_err:.3}; acc T=0 {a0:.3}, T=0.5 {a50:.3}; mean u correct {u_ok:.3}, incorrect {u_bad:.3}"
        ),
    )
}

fn c8_under_confidence(run: &NoisyRun) -> Outcome {
    let tta: Vec<&UncertaintyRecord> = run.others.iter().filter(|r| r.method == Method::Tta).collect();
    let u_du = mean(run.du.iter().map(|r| r.normalized_uncertainty));
    let u_tta = mean(tta.iter().map(|r| r.normalized_uncertainty));
    let mut all = run.du.clone();
    all.extend(run.others.iter().cloned());
    let summaries = summarize(&all, &EvalConfig::default()).unwrap();
    let doc = summary_json(&AppConfig::default(), &summaries);
    let ece_map = doc["ece"].as_object().unwrap();
    let all_reported = Method::ALL
        .iter()
        .all(|m| ece_map.get(m.as_str()).and_then(|v| v.as_f64()).is_some());
    let eces: Vec<String> = Method::ALL
        .iter()
        .map(|m| format!("{m} {:.3}", ece_map[m.as_str()].as_f64().unwrap_or(f64::NAN)))
        .collect();
    outcome(
        run.test.len() >= 500 && u_du > u_tta && all_reported,
        format!(
            "n={}; mean normalized u TTMA-DU {u_du:.3} vs TTA {u_tta:.3}; ECE {}",
            run.test.len(),
            eces.join(", ")
        ),
    )
}

fn record(id: u64, correct: bool, confidence: f64) -> UncertaintyRecord {
    UncertaintyRecord::new(id, Method::TtmaDu, 0, if correct { 0 } else { 1 }, 0.0, 2, confidence)
}

fn oracle_ece(records: &[UncertaintyRecord], bins: usize) -> f64 {
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<&UncertaintyRecord> = records
            .iter()
            .filter(|r| {
                r.confidence >= lo && (r.confidence < hi || (b == bins - 1 && r.confidence <= hi))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|r| r.is_correct()).count() as f64 / m;
        let conf = members.iter().map(|r| r.confidence).sum::<f64>() / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

fn c9_ece_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let two = [record(0, true, 1.0), record(1, false, 1.0)];
    let half = ece(&two, 10).unwrap().ece;
    worst = worst.max((half - 0.5).abs());
    let perfect: Vec<_> = (0..5).map(|i| record(i, true, 1.0)).collect();
    worst = worst.max(ece(&perfect, 10).unwrap().ece.abs());
    // hand computed: bins [0.2,0.3) {0.25 ok, 0.25 bad} -> |0.5-0.25|,
    // [0.9,1.0] {0.9 ok, 0.95 ok} -> |1-0.925|; weights 2/4 each
    let mixed = [
        record(0, true, 0.25),
        record(1, false, 0.25),
        record(2, true, 0.9),
        record(3, true, 0.95),
    ];
    let hand = 0.5 * 0.25 + 0.5 * 0.075;
    worst = worst.max((ece(&mixed, 10).unwrap().ece - hand).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..200u64 {
        let n = rng.random_range(1..40);
        let recs: Vec<_> = (0..n)
            .map(|i| record(case * 100 + i, rng.random_bool(0.6), rng.random_range(0.0..=1.0)))
            .collect();
        let bins = rng.random_range(1..=15);
        worst = worst.max((ece(&recs, bins).unwrap().ece - oracle_ece(&recs, bins)).abs());
        let acc = recs.iter().filter(|r| r.is_correct()).count() as f64 / n as f64;
        let conf = recs.iter().map(|r| r.confidence).sum::<f64>() / n as f64;
        worst = worst.max((ece(&recs, 1).unwrap().ece - (acc - conf).abs()).abs());
    }
    outcome(worst <= 1e-12, format!("two-sample ECE {half}, max |err| {worst:.2e}"))
}

fn uq(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_uq"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("run uq")
}

fn pipeline(root: &Path, workers: &str) -> Vec<(String, Vec<u8>)> {
    std::fs::create_dir_all(root.join("data")).unwrap();
    std::fs::create_dir_all(root.join("reports")).unwrap();
    std::fs::write(
        root.join("uq.toml"),
        "seed = 13\n\
         [dataset]\npreset = \"noisy-overlap\"\nclasses = 3\nsamples_per_class = 40\n\
         [train]\nepochs = 30\n\
         [ttma]\nk = 8\n\
         [baselines]\ntta_passes = 10\nmcdo_passes = 10\n\
         [eval]\nreport_dir = \"reports\"\n",
    )
    .unwrap();
    let steps: [&[&str]; 8] = [
        &["gen"],
        &["train"],
        &["estimate", "--method", "ttma-du,ttma-cdu,tta,mcdo,single"],
        &["report", "records.csv", "--kind", "curve"],
        &["report", "records.csv", "--kind", "ece"],
        &["report", "records.csv", "--kind", "hist"],
        &["report", "records.csv", "--kind", "matrix"],
        &["report", "records.csv", "--kind", "summary"],
    ];
    for step in steps {
        let mut args = vec!["--config", "uq.toml", "--workers", workers];
        args.extend_from_slice(step);
        let out = uq(&args, root);
        assert!(
            out.status.success(),
            "uq {step:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut files = Vec::new();
    for rel in [
        "data/train_labels.csv",
        "data/test_labels.csv",
        "data/train.bin",
        "model.weights",
        "records.csv",
        "reports/curve.csv",
        "reports/calibration.csv",
        "reports/histograms.csv",
        "reports/matrix.csv",
    ] {
        files.push((rel.to_string(), std::fs::read(root.join(rel)).unwrap()));
    }
    files
}

fn c10_cli_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let one = pipeline(a.path(), "1");
    let four = pipeline(b.path(), "4");
    let again = pipeline(c.path(), "1");
    let differing: Vec<&str> = one
        .iter()
        .zip(&four)
        .zip(&again)
        .filter(|((x, y), z)| x.1 != y.1 || x.1 != z.1)
        .map(|((x, _), _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} outputs compared across workers 1/4 and a rerun; differing: {differing:?}",
            one.len()
        ),
    )
}

fn main() {
    let noisy = noisy_overlap_run();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 entropy oracle", c1_entropy_oracle()),
        ("2 label inference round-trip", c2_round_trip()),
        ("3 vote count contract", c3_counts()),
        ("4 identity degeneracy", c4_identity()),
        ("5 gradient check", c5_gradient_check()),
        ("6 confusion/similarity signature", c6_relationship_signature()),
        ("7 selective prediction", c7_selective_prediction(&noisy)),
        ("8 under-confidence and ECE report", c8_under_confidence(&noisy)),
        ("9 ECE oracle", c9_ece_oracle()),
        ("10 CLI determinism", c10_cli_determinism()),
    ];
    let mut failed = Vec::new();
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
