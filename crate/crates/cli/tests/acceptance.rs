//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion that could run has failed.
//!
//! Criteria 4 and 10 need a labeled orthohantavirus corpus (CSV with
//! `id,sequence,host` columns, or FASTA with `host=` tokens) named by
//! `VHP_ORTHO_DATA`. Without it they print FAIL marked as blocked; set
//! `VHP_ACCEPTANCE_STRICT=1` to make that fatal too. `VHP_ACCEPTANCE_ONLY=3,9`
//! runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use ndarray::Array2;
use vhp_cli::args::{Cli, InputArgs, InputFormat};
use vhp_cli::io::read_labeled;
use vhp_cli::manifest::sha256_file;
use vhp_core::diagnostics::{
    chi_squared_sf, needleman_wunsch, AlignScoring, DiagnosticsReport, SequenceForm,
    SimilarityOptions,
};
use vhp_core::ingest::{make_split, select_records, write_csv};
use vhp_core::metrics::{confusion, micro_average_auc, precision_recall_f1};
use vhp_core::nn::count_params;
use vhp_core::nn::gradcheck::{check_all, CheckShape, DEFAULT_STEP};
use vhp_core::preprocess::{class_weights, encode_batch};
use vhp_core::rng::SplitMix64;
use vhp_core::synthetic::MotifCorpus;
use vhp_core::trainer::{train_fold, TrainConfig};
use vhp_core::{LabelMap, ModelConfig, SequenceRecord};

// Tolerances and sizes, as required.
const PARAMS: [(usize, usize, usize, usize); 3] = [
    (9, 155_273, 154_761, 512),
    (29, 156_573, 156_061, 512),
    (12, 155_468, 154_956, 512),
];
const GRAD_SHAPES: usize = 24;
const GRAD_MIN_SHAPES: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const OVERFIT_ACCURACY: f64 = 0.99;
const OVERFIT_EPOCHS: usize = 200;
const REAL_PER_CLASS: usize = 200;
const REAL_ACCURACY: f64 = 0.60;
const METRIC_SETS: usize = 100;
const AUC_SETS: usize = 50;
const P_VALUES: [(f64, usize, f64); 3] = [
    (197.81, 4, 1.11e-41),
    (88.36, 4, 2.93e-18),
    (47.62, 4, 1.13e-9),
];
const P_VALUE_REL: f64 = 0.02;
const ALIGN_TRIALS: usize = 200;
const ALIGN_MAX_LEN: usize = 8;
const WEIGHT_VECTORS: usize = 100;
const WEIGHT_REL: f64 = 1e-9;
const DETERMINISM_EPOCHS: &str = "5";
const DIAGNOSE_PAIRS: usize = 200;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

use Outcome::{Blocked, Fail, Pass};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn parameter_counts() -> Outcome {
    let mut bad = Vec::new();
    for (classes, total, trainable, frozen) in PARAMS {
        let p = count_params(&ModelConfig::new(classes));
        if (p.total, p.trainable, p.non_trainable) != (total, trainable, frozen) {
            bad.push(format!("C={classes}: {p:?}"));
        }
    }
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            "C=9/29/12 totals exact".into()
        } else {
            bad.join("; ")
        },
    )
}

fn gradients() -> Outcome {
    let mut rng = SplitMix64::new(0xC0FFEE);
    let mut worst = (0.0f64, String::new());
    let mut shapes = 0;
    for _ in 0..GRAD_SHAPES {
        let shape = CheckShape {
            batch: 2 + rng.below(3) as usize,
            len: 1 + rng.below(12) as usize,
            input_dim: 1 + rng.below(5) as usize,
            hidden: 1 + rng.below(8) as usize,
            classes: 2 + rng.below(4) as usize,
        };
        assert!(shape.batch <= 4 && shape.len <= 12 && shape.hidden <= 8);
        let reports = match check_all(shape, rng.next_u64(), DEFAULT_STEP) {
            Ok(r) => r,
            Err(e) => return Fail(format!("{shape:?}: {e}")),
        };
        for r in reports {
            if r.checked == 0 {
                return Fail(format!("{} checked no entries at {shape:?}", r.layer));
            }
            if !(r.max_relative_error <= worst.0) {
                worst = (r.max_relative_error, format!("{} at {shape:?}", r.layer));
            }
        }
        shapes += 1;
    }
    verdict(
        shapes >= GRAD_MIN_SHAPES && worst.0 < GRAD_TOL,
        format!(
            "{shapes} shapes, worst relative error {:.2e} ({}), tolerance {GRAD_TOL:.0e}",
            worst.0, worst.1
        ),
    )
}

fn overfit() -> Outcome {
    let records = MotifCorpus::toy(42).generate().unwrap();
    let labels = LabelMap::from_records(&records);
    let config = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let refs: Vec<&SequenceRecord> = records.iter().collect();
    let data = encode_batch::<f32>(&refs, &labels, config.seq_len).unwrap();
    // Validation on the training set itself gives inference-mode training accuracy.
    let (result, _) = match train_fold(&data, &data, labels.len(), &config, 0, None) {
        Ok(r) => r,
        Err(e) => return Fail(e.to_string()),
    };
    let reached = result
        .curves
        .iter()
        .find(|e| e.val_accuracy >= OVERFIT_ACCURACY)
        .map(|e| e.epoch);
    let running = result
        .curves
        .iter()
        .map(|e| e.train_accuracy)
        .fold(0.0, f64::max);
    verdict(
        reached.is_some(),
        format!(
            "{} sequences, L={}, best training accuracy {:.4} (first >= {OVERFIT_ACCURACY} at epoch {}), best dropout-mode batch accuracy {running:.4}",
            records.len(),
            config.seq_len,
            result.best_val_accuracy,
            reached.map_or("never".into(), |e| e.to_string())
        ),
    )
}

/// Stratified subsample of at most `per_class` records per host.
fn subsample(records: Vec<SequenceRecord>, per_class: usize, seed: u64) -> Vec<SequenceRecord> {
    let mut by_host: BTreeMap<String, Vec<SequenceRecord>> = BTreeMap::new();
    for r in records {
        by_host.entry(r.host.clone()).or_default().push(r);
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for (_, mut group) in by_host {
        rng.shuffle(&mut group);
        group.truncate(per_class);
        out.extend(group);
    }
    out
}

fn real_data() -> Option<PathBuf> {
    std::env::var_os("VHP_ORTHO_DATA").map(PathBuf::from)
}

fn load_real(path: &Path) -> anyhow::Result<Vec<SequenceRecord>> {
    let args = InputArgs {
        format: InputFormat::Auto,
        id_column: "id".into(),
        sequence_column: "sequence".into(),
        host_column: "host".into(),
    };
    Ok(subsample(read_labeled(path, &args)?, REAL_PER_CLASS, 42))
}

fn real_accuracy() -> Outcome {
    let Some(path) = real_data() else {
        return Blocked("orthohantavirus corpus not available; set VHP_ORTHO_DATA".into());
    };
    let run = || -> anyhow::Result<(f64, usize, usize, usize)> {
        let records = load_real(&path)?;
        let labels = LabelMap::from_records(&records);
        let epochs = std::env::var("VHP_ORTHO_EPOCHS")
            .ok()
            .map(|v| v.parse())
            .transpose()?
            .unwrap_or(100);
        let config = TrainConfig {
            epochs,
            use_class_weights: true,
            ..TrainConfig::default()
        };
        let plan = make_split(&records, 0.2, config.folds, config.seed)?;
        let encode = |ids: &[&str]| -> anyhow::Result<_> {
            Ok(encode_batch::<f32>(
                &select_records(&records, ids)?,
                &labels,
                config.seq_len,
            )?)
        };
        let train = encode(&plan.fold_train_ids(0))?;
        let val = encode(&plan.folds[0].iter().map(String::as_str).collect::<Vec<_>>())?;
        let test = encode(&plan.test_ids.iter().map(String::as_str).collect::<Vec<_>>())?;
        let (_, model) = train_fold(&train, &val, labels.len(), &config, 0, None)?;
        let report = vhp_core::metrics::evaluate(&model, &labels, &test)?;
        Ok((report.accuracy, labels.len(), records.len(), epochs))
    };
    match run() {
        Ok((acc, classes, n, epochs)) => verdict(
            acc >= REAL_ACCURACY,
            format!(
                "{n} sequences, {classes} hosts, {epochs} epochs: test accuracy {acc:.4} (threshold {REAL_ACCURACY})"
            ),
        ),
        Err(e) => Fail(format!("{e:#}")),
    }
}

fn metrics_oracles() -> Outcome {
    let mut rng = SplitMix64::new(7);
    for set in 0..METRIC_SETS {
        let c = 2 + rng.below(5) as usize;
        let n = 1 + rng.below(120) as usize;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
        let cm = confusion(&labels, &preds, c).unwrap();
        let scores = precision_recall_f1(&cm);
        for k in 0..c {
            for j in 0..c {
                let brute = labels
                    .iter()
                    .zip(&preds)
                    .filter(|&(&l, &p)| l == k && p == j)
                    .count() as u64;
                if cm.counts[k][j] != brute {
                    return Fail(format!("set {set}: confusion[{k}][{j}]"));
                }
            }
            let tp = labels
                .iter()
                .zip(&preds)
                .filter(|&(&l, &p)| l == k && p == k)
                .count();
            let predicted = preds.iter().filter(|&&p| p == k).count();
            let actual = labels.iter().filter(|&&l| l == k).count();
            let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let (p, r) = (div(tp, predicted), div(tp, actual));
            let f = if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            if (scores.precision[k], scores.recall[k], scores.f1[k]) != (p, r, f) {
                return Fail(format!("set {set}: class {k} scores"));
            }
        }
    }
    for set in 0..AUC_SETS {
        let c = 2 + rng.below(4) as usize;
        let n = 2 + rng.below(40) as usize;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
        let scores = Array2::from_shape_fn((n, c), |_| rng.below(5) as f64 / 4.0);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..n {
            for k in 0..c {
                if labels[i] == k {
                    pos.push(scores[[i, k]]);
                } else {
                    neg.push(scores[[i, k]]);
                }
            }
        }
        let mut twice = 0u64;
        for &p in &pos {
            for &q in &neg {
                twice += if p > q {
                    2
                } else if p == q {
                    1
                } else {
                    0
                };
            }
        }
        let oracle = twice as f64 / (2 * pos.len() * neg.len()) as f64;
        let got = micro_average_auc(&labels, scores.view()).unwrap();
        if got != oracle {
            return Fail(format!("AUC set {set}: {got} vs pairwise {oracle}"));
        }
    }
    Pass(format!(
        "{METRIC_SETS} confusion/P/R/F1 sets and {AUC_SETS} tied AUC sets match brute force exactly"
    ))
}

fn p_value_anchors() -> Outcome {
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (x, df, expected) in P_VALUES {
        let p = chi_squared_sf(x, df).unwrap();
        let rel = (p - expected).abs() / expected;
        worst = worst.max(rel);
        lines.push(format!("{x}->{p:.3e}"));
    }
    verdict(
        worst <= P_VALUE_REL,
        format!(
            "{}; worst relative error {:.2}%",
            lines.join(", "),
            100.0 * worst
        ),
    )
}

/// Best score over every global alignment, found by walking all of them.
fn enumerate_best(a: &[u8], b: &[u8], s: &AlignScoring) -> f64 {
    fn walk(a: &[u8], b: &[u8], s: &AlignScoring, score: f64, best: &mut f64) {
        if a.is_empty() && b.is_empty() {
            *best = best.max(score);
            return;
        }
        if !a.is_empty() && !b.is_empty() {
            let pair = if a[0] == b[0] {
                s.match_score
            } else {
                s.mismatch
            };
            walk(&a[1..], &b[1..], s, score + pair, best);
        }
        if !a.is_empty() {
            walk(&a[1..], b, s, score + s.gap, best);
        }
        if !b.is_empty() {
            walk(a, &b[1..], s, score + s.gap, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    walk(a, b, s, 0.0, &mut best);
    best
}

fn alignment_oracle() -> Outcome {
    let s = AlignScoring::default();
    let mut rng = SplitMix64::new(11);
    let draw = |rng: &mut SplitMix64| -> Vec<u8> {
        let len = 1 + rng.below(ALIGN_MAX_LEN as u64) as usize;
        (0..len).map(|_| b"ACGT"[rng.below(4) as usize]).collect()
    };
    for trial in 0..ALIGN_TRIALS {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let dp = needleman_wunsch(&a, &b, &s).unwrap();
        let brute = enumerate_best(&a, &b, &s);
        if dp != brute {
            return Fail(format!(
                "trial {trial}: {} vs {}: DP {dp}, enumeration {brute}",
                String::from_utf8_lossy(&a),
                String::from_utf8_lossy(&b)
            ));
        }
    }
    Pass(format!(
        "{ALIGN_TRIALS} random pairs up to length {ALIGN_MAX_LEN} match exhaustive enumeration"
    ))
}

fn weight_identity() -> Outcome {
    let mut rng = SplitMix64::new(13);
    let mut worst = 0.0f64;
    for _ in 0..WEIGHT_VECTORS {
        let classes = 1 + rng.below(30) as usize;
        let counts: Vec<usize> = (0..classes)
            .map(|_| 1 + rng.below(50_000) as usize)
            .collect();
        let w = class_weights(&counts).unwrap();
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let weighted: f64 = w
            .as_slice()
            .iter()
            .zip(&counts)
            .map(|(w, &c)| w * c as f64)
            .sum();
        worst = worst.max((weighted - total).abs() / total);
    }
    verdict(
        worst <= WEIGHT_REL,
        format!("{WEIGHT_VECTORS} vectors, worst relative deviation {worst:.2e}"),
    )
}

fn run_cli(args: &[&str]) -> anyhow::Result<PathBuf> {
    let cli = Cli::try_parse_from(std::iter::once("vhp").chain(args.iter().copied()))?;
    cli.command.validate().map_err(anyhow::Error::msg)?;
    vhp_cli::run(&cli, &mut std::io::sink())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let run = || -> anyhow::Result<(Vec<String>, usize)> {
        let corpus = root.join("toy.csv");
        write_csv(
            &MotifCorpus::toy(42).generate()?,
            fs::File::create(&corpus)?,
        )?;
        let prepared = root.join("prepared");
        let data = root.to_str().unwrap();
        run_cli(&[
            "--data-dir",
            data,
            "prepare",
            corpus.to_str().unwrap(),
            "--min-host-count",
            "1",
            "--out",
            prepared.to_str().unwrap(),
        ])?;
        let mut digests = Vec::new();
        for name in ["a", "b"] {
            let out = root.join(name);
            run_cli(&[
                "--data-dir",
                data,
                "train",
                prepared.to_str().unwrap(),
                "--epochs",
                DETERMINISM_EPOCHS,
                "--seed",
                "42",
                "--threads",
                "1",
                "--out",
                out.to_str().unwrap(),
            ])?;
            let mut files: Vec<PathBuf> = fs::read_dir(&out)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            files.retain(|p| {
                let name = p.file_name().unwrap().to_str().unwrap();
                name.ends_with(".ckpt") || name.ends_with("_curves.csv")
            });
            files.sort();
            digests.push(
                files
                    .iter()
                    .map(|p| {
                        Ok(format!(
                            "{}={}",
                            p.file_name().unwrap().to_str().unwrap(),
                            sha256_file(p)?.sha256
                        ))
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?,
            );
        }
        let n = digests[0].len();
        Ok((
            if digests[0] == digests[1] {
                Vec::new()
            } else {
                digests.concat()
            },
            n,
        ))
    };
    match run() {
        Ok((diff, n)) => verdict(
            diff.is_empty() && n == 11,
            format!("{n} checkpoint and curve files digest-identical across two runs"),
        ),
        Err(e) => Fail(format!("{e:#}")),
    }
}

fn diagnostics_sign() -> Outcome {
    let Some(path) = real_data() else {
        return Blocked("orthohantavirus corpus not available; set VHP_ORTHO_DATA".into());
    };
    let run = || -> anyhow::Result<(f64, f64)> {
        let records = load_real(&path)?;
        let plan = make_split(&records, 0.2, 5, 42)?;
        let seqs = |ids: &[String]| -> anyhow::Result<Vec<String>> {
            Ok(select_records(&records, ids)?
                .into_iter()
                .map(|r| r.sequence.clone())
                .collect())
        };
        let train = seqs(&plan.train_ids)?;
        let test = seqs(&plan.test_ids)?;
        let train: Vec<&str> = train.iter().map(String::as_str).collect();
        let test: Vec<&str> = test.iter().map(String::as_str).collect();
        let options = SimilarityOptions {
            pairs: DIAGNOSE_PAIRS,
            ..SimilarityOptions::default()
        };
        let report = DiagnosticsReport::compute(
            "orthohantavirus",
            &train,
            &test,
            &[SequenceForm::Raw, SequenceForm::Preprocessed],
            &options,
        )?;
        Ok((
            report.similarity[0].mean_alignment_percent,
            report.similarity[1].mean_alignment_percent,
        ))
    };
    match run() {
        Ok((before, after)) => verdict(
            after > before,
            format!("{DIAGNOSE_PAIRS} pairs: alignment {before:.2}% before, {after:.2}% after preprocessing"),
        ),
        Err(e) => Fail(format!("{e:#}")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter counts", parameter_counts),
        ("gradient correctness", gradients),
        ("toy overfit", overfit),
        ("real-data accuracy", real_accuracy),
        ("metrics oracles", metrics_oracles),
        ("chi-squared anchors", p_value_anchors),
        ("alignment oracle", alignment_oracle),
        ("class-weight identity", weight_identity),
        ("training determinism", determinism),
        ("diagnostics sign", diagnostics_sign),
    ];
    let strict = std::env::var_os("VHP_ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("VHP_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut blocked = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Blocked(d) => {
                blocked += 1;
                ("FAIL", format!("blocked: {d}"))
            }
        };
        println!("{tag} [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1);
    }
    println!(
        "{} passed, {failed} failed, {blocked} blocked on missing data",
        ran - failed - blocked
    );
    if failed > 0 || (strict && blocked > 0) {
        std::process::exit(1);
    }
}
