//! Subcommand bodies. Each one writes into a fresh [`RunDir`] and returns its path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use vhp_core::diagnostics::{DiagnosticsReport, SequenceForm, SimilarityOptions};
use vhp_core::ingest::{filter_hosts, host_counts, make_split, select_records, write_csv};
use vhp_core::nn::{load_checkpoint, AdamConfig, Checkpoint};
use vhp_core::preprocess::encode_batch;
use vhp_core::rng::{derive_seed, streams};
use vhp_core::trainer::{
    fold_checkpoint_name, fold_curves_name, predict, run_cv, TrainConfig, SELECTED_MODEL_NAME,
};
use vhp_core::{LabelMap, SequenceRecord, SplitPlan};

use crate::args::{DiagnoseArgs, DiagnoseMode, EvaluateArgs, PredictArgs, PrepareArgs, TrainArgs};
use crate::io::{
    ensure_unique_ids, prepared, read_json, read_labeled, read_prepared_table, read_unlabeled,
};
use crate::manifest::RunDir;

pub const CV_SUMMARY: &str = "cv_summary.json";
pub const REPORT: &str = "report.json";
pub const CONFUSION: &str = "confusion.csv";
pub const CONFUSION_PERCENT: &str = "confusion_percent.csv";
pub const CLASS_METRICS: &str = "class_metrics.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const SIMILARITY: &str = "similarity.csv";
pub const COMPOSITION: &str = "composition.csv";
pub const DIAGNOSTICS: &str = "diagnostics.json";

pub fn prepare(data_dir: &Path, args: &PrepareArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let mut run = RunDir::create(
        data_dir,
        args.output.out.as_deref(),
        "prepare",
        Some(args.seed),
    )?;
    let mut records = Vec::new();
    for path in &args.inputs {
        run.add_input(path)?;
        records.extend(read_labeled(path, &args.input)?);
    }
    ensure_unique_ids(records.iter().map(|r| r.id.as_str()))?;
    run.lap("read");

    let before = host_counts(&records);
    let kept = filter_hosts(&records, args.min_host_count);
    if kept.is_empty() {
        bail!(
            "no host has at least {} sequences ({} hosts, {} records read)",
            args.min_host_count,
            before.len(),
            records.len()
        );
    }
    let labels = LabelMap::from_records(&kept);
    let plan = make_split(&kept, args.test_fraction, args.folds as usize, args.seed)?;
    run.lap("split");

    write_csv(&kept, run.create_output(prepared::RECORDS)?)?;
    write_csv(
        &owned(select_records(&kept, &plan.train_ids)?),
        run.create_output(prepared::TRAIN)?,
    )?;
    write_csv(
        &owned(select_records(&kept, &plan.test_ids)?),
        run.create_output(prepared::TEST)?,
    )?;
    run.write_json(prepared::SPLIT, &plan)?;
    run.write_json(prepared::LABELS, &labels)?;
    run.lap("write");

    let host_of: BTreeMap<&str, &str> = kept
        .iter()
        .map(|r| (r.id.as_str(), r.host.as_str()))
        .collect();
    let count_in =
        |ids: &[String], host: &str| ids.iter().filter(|id| host_of[id.as_str()] == host).count();
    writeln!(
        out,
        "{:<32} {:>8} {:>8} {:>8}",
        "host", "total", "train", "test"
    )?;
    for (host, n) in host_counts(&kept) {
        writeln!(
            out,
            "{:<32} {:>8} {:>8} {:>8}",
            host,
            n,
            count_in(&plan.train_ids, &host),
            count_in(&plan.test_ids, &host)
        )?;
    }
    let dropped: Vec<&String> = before
        .keys()
        .filter(|h| labels.index_of(h).is_none())
        .collect();
    writeln!(
        out,
        "{} hosts kept, {} dropped below {} sequences; {} train, {} test, {} folds",
        labels.len(),
        dropped.len(),
        args.min_host_count,
        plan.train_ids.len(),
        plan.test_ids.len(),
        plan.folds.len()
    )?;

    run.finish(
        serde_json::to_value(args)?,
        json!({
            "root": args.seed,
            "split": derive_seed(args.seed, streams::SPLIT),
        }),
    )
}

fn owned(records: Vec<&SequenceRecord>) -> Vec<SequenceRecord> {
    records.into_iter().cloned().collect()
}

pub fn train_config(args: &TrainArgs, folds: usize) -> TrainConfig {
    TrainConfig {
        batch_size: args.batch_size as usize,
        epochs: args.epochs as usize,
        folds,
        use_class_weights: args.class_weights.is_on(),
        seed: args.seed,
        seq_len: args.seq_len as usize,
        hidden_per_dir: args.hidden as usize,
        dense_units: args.dense_units as usize,
        optimizer: AdamConfig {
            learning_rate: args.learning_rate,
            ..AdamConfig::default()
        },
        early_stop_patience: args.early_stop_patience.map(|p| p as usize),
        threads: args.threads as usize,
        ..TrainConfig::default()
    }
}

pub fn train(data_dir: &Path, args: &TrainArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let dir = &args.prepared;
    if !dir.is_dir() {
        bail!("{} is not a prepared directory", dir.display());
    }
    let mut run = RunDir::create(
        data_dir,
        args.output.out.as_deref(),
        "train",
        Some(args.seed),
    )?;
    let records_path = dir.join(prepared::RECORDS);
    let split_path = dir.join(prepared::SPLIT);
    let labels_path = dir.join(prepared::LABELS);
    for p in [&records_path, &split_path, &labels_path] {
        run.add_input(p)?;
    }
    let records = read_prepared_table(&records_path)?;
    let plan: SplitPlan = read_json(&split_path)?;
    let labels: LabelMap = read_json(&labels_path)?;
    let config = train_config(args, plan.folds.len());
    config.validate()?;
    run.lap("read");

    let outcome = run_cv(&records, &plan, &labels, &config, Some(run.path()))?;
    run.lap("train");
    for r in &outcome.folds {
        if r.checkpoint.is_some() {
            run.add_output(fold_checkpoint_name(r.fold));
        }
        run.add_output(fold_curves_name(r.fold));
    }
    run.add_output(SELECTED_MODEL_NAME);

    let mut summary = outcome.summary();
    for f in &mut summary.folds {
        f.checkpoint = f
            .checkpoint
            .as_ref()
            .and_then(|p| p.file_name())
            .map(PathBuf::from);
    }
    run.write_json(CV_SUMMARY, &summary)?;

    for r in &outcome.folds {
        writeln!(
            out,
            "fold {}: best validation accuracy {:.4} at epoch {} ({} epochs run)",
            r.fold,
            r.best_val_accuracy,
            r.best_epoch,
            r.curves.len()
        )?;
    }
    writeln!(
        out,
        "selected fold {}; mean {:.4} std {:.4}",
        outcome.selected_fold, outcome.mean_best_val_accuracy, outcome.std_best_val_accuracy
    )?;

    let fold_seeds: Vec<_> = (0..config.folds as u64)
        .map(|k| {
            json!({
                "fold": k,
                "init": derive_seed(config.seed, streams::FOLD_INIT + k),
                "shuffle": derive_seed(config.seed, streams::FOLD_SHUFFLE + k),
                "dropout": derive_seed(config.seed, streams::FOLD_DROPOUT + k),
            })
        })
        .collect();
    run.finish(
        json!({
            "cli": args,
            "train_config": config,
            "selection": "single fold model with the highest best-validation accuracy; earliest fold on ties",
        }),
        json!({ "root": config.seed, "split": plan.seed, "folds": fold_seeds }),
    )
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    load_checkpoint(BufReader::new(file))
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn checkpoint_seed(ckpt: &Checkpoint) -> Option<u64> {
    ckpt.metadata.get("seed").and_then(|s| s.as_u64())
}

pub fn evaluate(data_dir: &Path, args: &EvaluateArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let ckpt = load_model(&args.model)?;
    let mut run = RunDir::create(
        data_dir,
        args.output.out.as_deref(),
        "evaluate",
        checkpoint_seed(&ckpt),
    )?;
    run.add_input(&args.model)?;
    let records = if args.test.is_dir() {
        let labels_path = args.test.join(prepared::LABELS);
        let test_path = args.test.join(prepared::TEST);
        run.add_input(&labels_path)?;
        run.add_input(&test_path)?;
        let labels: LabelMap = read_json(&labels_path)?;
        if labels != ckpt.labels {
            bail!(
                "label map mismatch: checkpoint has {:?}, prepared data has {:?}",
                ckpt.labels.labels(),
                labels.labels()
            );
        }
        read_prepared_table(&test_path)?
    } else {
        run.add_input(&args.test)?;
        read_labeled(&args.test, &args.input)?
    };
    let unknown: Vec<&str> = records
        .iter()
        .map(|r| r.host.as_str())
        .filter(|h| ckpt.labels.index_of(h).is_none())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        bail!("label map mismatch: hosts {unknown:?} are not known to the checkpoint");
    }
    let refs: Vec<&SequenceRecord> = records.iter().collect();
    let data = encode_batch::<f32>(&refs, &ckpt.labels, ckpt.model.config.seq_len)?;
    run.lap("read");
    let report = vhp_core::metrics::evaluate(&ckpt.model, &ckpt.labels, &data)?;
    run.lap("evaluate");

    run.write_json(REPORT, &report)?;
    report
        .confusion
        .write_csv(&ckpt.labels, false, run.create_output(CONFUSION)?)?;
    report
        .confusion
        .write_csv(&ckpt.labels, true, run.create_output(CONFUSION_PERCENT)?)?;
    report.write_class_csv(run.create_output(CLASS_METRICS)?)?;

    writeln!(out, "samples   {}", report.samples)?;
    writeln!(out, "accuracy  {:.4}", report.accuracy)?;
    writeln!(out, "micro-AUC {:.4}", report.micro_auc)?;
    run.finish(
        serde_json::to_value(args)?,
        json!({ "training": checkpoint_seed(&ckpt) }),
    )
}

pub fn predict_cmd(data_dir: &Path, args: &PredictArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let ckpt = load_model(&args.model)?;
    let mut run = RunDir::create(
        data_dir,
        args.output.out.as_deref(),
        "predict",
        checkpoint_seed(&ckpt),
    )?;
    run.add_input(&args.model)?;
    run.add_input(&args.input)?;
    let records = read_unlabeled(&args.input, &args.input_format)?;
    run.lap("read");
    let seqs: Vec<&str> = records.iter().map(|r| r.sequence.as_str()).collect();
    let preds = predict(&ckpt.model, &seqs)?;
    run.lap("predict");

    let mut header = vec!["id".to_owned(), "predicted_host".to_owned()];
    header.extend(ckpt.labels.labels().iter().map(|h| format!("prob_{h}")));
    let rows = records.iter().zip(&preds).map(|(r, p)| {
        let mut row = vec![
            r.id.clone(),
            ckpt.labels.label(p.label).unwrap_or_default().to_owned(),
        ];
        row.extend(p.probabilities.iter().map(|v| v.to_string()));
        row
    });
    let write_table = |sink: &mut dyn Write| -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(&header)?;
        for row in rows.clone() {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    };
    if args.stdout {
        write_table(out)?;
    } else {
        write_table(&mut run.create_output(PREDICTIONS)?)?;
    }
    run.finish(
        json!({ "cli": args, "seq_len": ckpt.model.config.seq_len, "labels": ckpt.labels }),
        json!({ "training": checkpoint_seed(&ckpt) }),
    )
}

pub fn diagnose(data_dir: &Path, args: &DiagnoseArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let mut run = RunDir::create(
        data_dir,
        args.output.out.as_deref(),
        "diagnose",
        Some(args.seed),
    )?;
    let (train_path, test_path, prepared_dir) = match &args.test {
        Some(test) => (args.train.clone(), test.clone(), false),
        None => (
            args.train.join(prepared::TRAIN),
            args.train.join(prepared::TEST),
            true,
        ),
    };
    run.add_input(&train_path)?;
    run.add_input(&test_path)?;
    let (train, test) = if prepared_dir {
        (
            read_prepared_table(&train_path)?,
            read_prepared_table(&test_path)?,
        )
    } else {
        (
            read_labeled(&train_path, &args.input)?,
            read_labeled(&test_path, &args.input)?,
        )
    };
    let train: Vec<&str> = train.iter().map(|r| r.sequence.as_str()).collect();
    let test: Vec<&str> = test.iter().map(|r| r.sequence.as_str()).collect();
    run.lap("read");

    let forms = match args.mode {
        DiagnoseMode::Raw => vec![SequenceForm::Raw],
        DiagnoseMode::Preprocessed => vec![SequenceForm::Preprocessed],
        DiagnoseMode::Both => vec![SequenceForm::Raw, SequenceForm::Preprocessed],
    };
    let options = SimilarityOptions {
        pairs: args.pairs as usize,
        seed: args.seed,
        seq_len: args.seq_len as usize,
        ..SimilarityOptions::default()
    };
    let report = DiagnosticsReport::compute(&args.name, &train, &test, &forms, &options)?;
    run.lap("compute");

    report.write_similarity_csv(run.create_output(SIMILARITY)?)?;
    report.write_composition_csv(run.create_output(COMPOSITION)?)?;
    run.write_json(DIAGNOSTICS, &report)?;

    for (s, c) in report.similarity.iter().zip(&report.composition) {
        writeln!(
            out,
            "{}: alignment {:.2}%  k-mer {:.2}%  identity {:.2}%  chi-squared {:.2} (df {}, p {:.3e})",
            s.form.label(),
            s.mean_alignment_percent,
            s.mean_kmer_similarity_percent,
            s.mean_identity_percent,
            c.result.statistic,
            c.result.df,
            c.result.p_value
        )?;
    }
    run.finish(
        json!({ "cli": args, "similarity": options }),
        json!({
            "root": args.seed,
            "pair_sampling": derive_seed(args.seed, streams::PAIR_SAMPLING),
        }),
    )
}
