//! Cross-validated training with best-validation checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{select_records, LabelMap, SequenceRecord, SplitPlan};
use crate::metrics::{accuracy, argmax_rows};
use crate::nn::{
    adam_step, backward, init_params, loss_forward, save_checkpoint, AdamConfig, AdamState, Model,
    ModelConfig,
};
use crate::preprocess::{
    class_weights, encode_batch, encode_sequences, label_counts, EncodedBatch,
};
use crate::rng::{derive_seed, streams, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub use_class_weights: bool,
    pub seed: u64,
    pub seq_len: usize,
    pub hidden_per_dir: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub optimizer: AdamConfig,
    /// Stop a fold after this many epochs without validation improvement.
    /// Off by default.
    pub early_stop_patience: Option<usize>,
    /// Folds trained concurrently. Each fold is single-threaded and
    /// deterministic regardless of this setting.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 200,
            folds: 5,
            use_class_weights: false,
            seed: 42,
            seq_len: 400,
            hidden_per_dir: 128,
            dense_units: 64,
            dropout_rate: 0.2,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
            optimizer: AdamConfig::default(),
            early_stop_patience: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least 2 folds are required".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early-stop patience must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            seq_len: self.seq_len,
            input_dim: crate::preprocess::CHANNELS,
            hidden_per_dir: self.hidden_per_dir,
            dense_units: self.dense_units,
            num_classes,
            dropout_rate: self.dropout_rate,
            bn_epsilon: self.bn_epsilon,
            bn_momentum: self.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub curves: Vec<EpochRecord>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Where [`train_fold`] writes its best weights.
#[derive(Debug, Clone)]
pub struct CheckpointTarget {
    pub path: PathBuf,
    pub labels: LabelMap,
}

pub fn write_curves_csv<W: Write>(curves: &[EpochRecord], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "epoch,train_loss,train_acc,val_loss,val_acc")?;
    for r in curves {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Contiguous batches over `order`. A trailing batch of one sample is dropped
/// because batch normalization cannot train on it.
fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2)
}

/// Inference-mode probabilities in chunks of `chunk` rows.
pub fn predict_proba(
    model: &Model<f32>,
    inputs: ArrayView3<'_, f32>,
    chunk: usize,
) -> Result<Array2<f32>> {
    let n = inputs.dim().0;
    let mut out = Array2::zeros((n, model.config.num_classes));
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let p = model.predict_proba(inputs.slice(s![start..end, .., ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&p);
        start = end;
    }
    Ok(out)
}

/// Probability vector and arg-max class of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f32>,
}

/// Inference on raw sequences: normalize, resize to the model's length, encode, predict.
pub fn predict(model: &Model<f32>, sequences: &[&str]) -> Result<Vec<Prediction>> {
    let inputs = encode_sequences::<f32>(sequences, model.config.seq_len)?;
    let probs = predict_proba(model, inputs.view(), 128)?;
    let labels = argmax_rows(probs.view());
    Ok(probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, label)| Prediction {
            label,
            probabilities: row.to_vec(),
        })
        .collect())
}

fn evaluate_split(
    model: &Model<f32>,
    data: &EncodedBatch<f32>,
    chunk: usize,
) -> Result<(f64, f64)> {
    let probs = predict_proba(model, data.inputs.view(), chunk)?;
    let ones = vec![1.0f32; data.len()];
    let loss = loss_forward(probs.view(), &data.labels, &ones)? as f64;
    let acc = accuracy(&data.labels, &argmax_rows(probs.view()));
    Ok((loss, acc))
}

/// Per-sample loss weights: class weights from the counts in `labels` when
/// enabled, otherwise exactly 1.
pub fn training_weights(
    config: &TrainConfig,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f32>> {
    if config.use_class_weights {
        Ok(class_weights(&label_counts(labels, num_classes))?.sample_weights(labels))
    } else {
        Ok(vec![1.0; labels.len()])
    }
}

/// Trains one model from scratch on `train`, validating on `val` after each
/// epoch, and returns the weights with the best validation accuracy.
///
/// Randomness (initialization, epoch shuffles, dropout masks) comes from
/// streams of `config.seed` keyed by `fold`.
pub fn train_fold(
    train: &EncodedBatch<f32>,
    val: &EncodedBatch<f32>,
    num_classes: usize,
    config: &TrainConfig,
    fold: usize,
    checkpoint: Option<&CheckpointTarget>,
) -> Result<(FoldResult, Model<f32>)> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "training data needs at least 2 samples".into(),
        ));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation data is empty".into()));
    }
    let model_config = config.model_config(num_classes);
    for data in [train, val] {
        if data.seq_len() != model_config.seq_len {
            return Err(Error::Shape(format!(
                "encoded length {} differs from configured {}",
                data.seq_len(),
                model_config.seq_len
            )));
        }
    }

    let tag = fold as u64;
    let mut model = init_params::<f32>(
        &model_config,
        derive_seed(config.seed, streams::FOLD_INIT + tag),
    )?;
    let mut shuffle = SplitMix64::new(derive_seed(config.seed, streams::FOLD_SHUFFLE + tag));
    let dropout_root = derive_seed(config.seed, streams::FOLD_DROPOUT + tag);
    let mut optimizer = AdamState::for_weights(config.optimizer, &model.weights);

    let weights = training_weights(config, &train.labels, num_classes)?;

    let mut curves = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut hits = 0usize;
        for idx in batches(&order, config.batch_size) {
            let batch = train.select(idx);
            let w: Vec<f32> = idx.iter().map(|&i| weights[i]).collect();
            let cache =
                model.forward_train(batch.inputs.view(), derive_seed(dropout_root, step))?;
            let loss = loss_forward(cache.probs.view(), &batch.labels, &w)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {loss} at epoch {epoch}, step {step}"
                )));
            }
            let grads = backward(&model, &cache, &batch.labels, &w)?;
            adam_step(&mut model, &grads, &mut optimizer)?;

            let predicted = argmax_rows(cache.probs.view());
            hits += predicted
                .iter()
                .zip(&batch.labels)
                .filter(|(a, b)| a == b)
                .count();
            loss_sum += loss as f64 * idx.len() as f64;
            seen += idx.len();
            step += 1;
        }

        let (val_loss, val_accuracy) = evaluate_split(&model, val, config.batch_size)?;
        curves.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: hits as f64 / seen as f64,
            val_loss,
            val_accuracy,
        });

        if best
            .as_ref()
            .map_or(true, |(acc, _, _)| val_accuracy > *acc)
        {
            if let Some(target) = checkpoint {
                write_checkpoint(&model, target, fold, epoch, val_accuracy, config)?;
            }
            best = Some((val_accuracy, epoch, model.clone()));
        }
        if let (Some(patience), Some((_, best_epoch, _))) = (config.early_stop_patience, &best) {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    let (best_val_accuracy, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok((
        FoldResult {
            fold,
            curves,
            best_val_accuracy,
            best_epoch,
            checkpoint: checkpoint.map(|t| t.path.clone()),
        },
        best_model,
    ))
}

fn write_checkpoint(
    model: &Model<f32>,
    target: &CheckpointTarget,
    fold: usize,
    epoch: usize,
    val_accuracy: f64,
    config: &TrainConfig,
) -> Result<()> {
    let metadata = serde_json::json!({
        "fold": fold,
        "epoch": epoch,
        "val_accuracy": val_accuracy,
        "seed": config.seed,
        "use_class_weights": config.use_class_weights,
        "train_config": config,
    });
    let file = File::create(&target.path)?;
    save_checkpoint(model, &target.labels, &metadata, BufWriter::new(file))
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub selected_fold: usize,
    pub model: Model<f32>,
    pub mean_best_val_accuracy: f64,
    pub std_best_val_accuracy: f64,
}

/// Summary written next to the fold outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub selected_fold: usize,
    pub mean_best_val_accuracy: f64,
    pub std_best_val_accuracy: f64,
}

impl CvOutcome {
    pub fn summary(&self) -> CvSummary {
        CvSummary {
            folds: self.folds.clone(),
            selected_fold: self.selected_fold,
            mean_best_val_accuracy: self.mean_best_val_accuracy,
            std_best_val_accuracy: self.std_best_val_accuracy,
        }
    }
}

/// File names used by [`run_cv`] inside its output directory.
pub fn fold_checkpoint_name(fold: usize) -> String {
    format!("fold_{fold}.ckpt")
}

pub fn fold_curves_name(fold: usize) -> String {
    format!("fold_{fold}_curves.csv")
}

pub const SELECTED_MODEL_NAME: &str = "model.ckpt";

/// Trains one model per fold of `plan` and selects the fold checkpoint with
/// the highest best-validation accuracy (earliest fold on ties).
///
/// With `out_dir`, writes per-fold checkpoints and curve CSVs plus the
/// selected model as [`SELECTED_MODEL_NAME`].
pub fn run_cv(
    records: &[SequenceRecord],
    plan: &SplitPlan,
    labels: &LabelMap,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CvOutcome> {
    config.validate()?;
    if plan.folds.len() != config.folds {
        return Err(Error::Config(format!(
            "split plan has {} folds, configuration asks for {}",
            plan.folds.len(),
            config.folds
        )));
    }
    let train_records = select_records(records, &plan.train_ids)?;
    let encoded = encode_batch::<f32>(&train_records, labels, config.seq_len)?;
    let position: std::collections::HashMap<&str, usize> = plan
        .train_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let run_fold = |fold: usize| -> Result<(FoldResult, Model<f32>)> {
        let val_idx: Vec<usize> = plan.folds[fold]
            .iter()
            .map(|id| {
                position.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Config(format!("fold id `{id}` is not in the training split"))
                })
            })
            .collect::<Result<_>>()?;
        let train_idx: Vec<usize> = plan
            .fold_train_ids(fold)
            .iter()
            .map(|id| position[id])
            .collect();
        let target = out_dir.map(|d| CheckpointTarget {
            path: d.join(fold_checkpoint_name(fold)),
            labels: labels.clone(),
        });
        let (result, model) = train_fold(
            &encoded.select(&train_idx),
            &encoded.select(&val_idx),
            labels.len(),
            config,
            fold,
            target.as_ref(),
        )?;
        if let Some(dir) = out_dir {
            write_curves_csv(
                &result.curves,
                File::create(dir.join(fold_curves_name(fold)))?,
            )?;
        }
        Ok((result, model))
    };
    let wrap = |fold: usize| {
        run_fold(fold).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })
    };

    let results: Vec<(FoldResult, Model<f32>)> = if config.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| {
                (0..config.folds)
                    .into_par_iter()
                    .map(wrap)
                    .collect::<Result<_>>()
            })?
    } else {
        (0..config.folds).map(wrap).collect::<Result<_>>()?
    };

    let mut selected = 0;
    for (k, (r, _)) in results.iter().enumerate() {
        if r.best_val_accuracy > results[selected].0.best_val_accuracy {
            selected = k;
        }
    }
    let accs: Vec<f64> = results.iter().map(|(r, _)| r.best_val_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;

    let mut folds = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for (r, m) in results {
        folds.push(r);
        models.push(m);
    }
    let model = models.swap_remove(selected);
    if let Some(dir) = out_dir {
        let metadata = serde_json::json!({
            "selected_fold": selected,
            "best_val_accuracy": folds[selected].best_val_accuracy,
            "best_epoch": folds[selected].best_epoch,
            "seed": config.seed,
            "use_class_weights": config.use_class_weights,
            "train_config": config,
        });
        let file = File::create(dir.join(SELECTED_MODEL_NAME))?;
        save_checkpoint(&model, labels, &metadata, BufWriter::new(file))?;
    }
    Ok(CvOutcome {
        folds,
        selected_fold: selected,
        model,
        mean_best_val_accuracy: mean,
        std_best_val_accuracy: var.sqrt(),
    })
}

/// Accuracy of `model` on `data` in inference mode.
pub fn inference_accuracy(model: &Model<f32>, data: &EncodedBatch<f32>) -> Result<f64> {
    let probs = predict_proba(model, data.inputs.view(), 128)?;
    Ok(accuracy(&data.labels, &argmax_rows(probs.view())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::make_split;
    use crate::nn::load_checkpoint;
    use crate::synthetic::MotifCorpus;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 3,
            folds: 2,
            seq_len: 40,
            hidden_per_dir: 4,
            dense_units: 6,
            ..TrainConfig::default()
        }
    }

    fn toy_data(config: &TrainConfig) -> (Vec<SequenceRecord>, LabelMap, EncodedBatch<f32>) {
        let records = MotifCorpus::toy(5).generate().unwrap();
        let labels = LabelMap::from_records(&records);
        let refs: Vec<&SequenceRecord> = records.iter().collect();
        let data = encode_batch(&refs, &labels, config.seq_len).unwrap();
        (records, labels, data)
    }

    #[test]
    fn defaults_match_published_protocol() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.batch_size, c.epochs, c.folds, c.seq_len),
            (128, 200, 5, 400)
        );
        assert_eq!(c.early_stop_patience, None);
        assert_eq!(c.threads, 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 0,
            ..tiny()
        };
        let (_, labels, data) = toy_data(&config);
        let target = CheckpointTarget {
            path: dir.path().join("x.ckpt"),
            labels,
        };
        assert!(train_fold(&data, &data, 4, &config, 0, Some(&target)).is_err());
        assert!(!target.path.exists());
        for bad in [
            TrainConfig {
                batch_size: 1,
                ..tiny()
            },
            TrainConfig { folds: 1, ..tiny() },
            TrainConfig {
                threads: 0,
                ..tiny()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn empty_sources_are_rejected() {
        let config = tiny();
        let (_, _, data) = toy_data(&config);
        let empty = data.select(&[]);
        assert!(train_fold(&empty, &data, 4, &config, 0, None).is_err());
        assert!(train_fold(&data, &empty, 4, &config, 0, None).is_err());
    }

    #[test]
    fn unweighted_training_uses_unit_weights() {
        let w = training_weights(&tiny(), &[0, 0, 1, 2, 2, 2], 3).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
        let on = TrainConfig {
            use_class_weights: true,
            ..tiny()
        };
        let w = training_weights(&on, &[0, 0, 1, 2, 2, 2], 3).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn fold_training_is_reproducible_and_checkpoints_best() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let (_, labels, data) = toy_data(&config);
        let train = data.select(&(0..80).filter(|i| i % 4 != 0).collect::<Vec<_>>());
        let val = data.select(&(0..80).filter(|i| i % 4 == 0).collect::<Vec<_>>());
        let target = CheckpointTarget {
            path: dir.path().join("best.ckpt"),
            labels: labels.clone(),
        };
        let (a, model) = train_fold(&train, &val, 4, &config, 1, Some(&target)).unwrap();
        let (b, _) = train_fold(&train, &val, 4, &config, 1, None).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.curves.len(), config.epochs);
        let max = a
            .curves
            .iter()
            .map(|r| r.val_accuracy)
            .fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_accuracy, max);
        assert_eq!(a.curves[a.best_epoch - 1].val_accuracy, max);
        assert_eq!(inference_accuracy(&model, &val).unwrap(), max);

        let ck = load_checkpoint(File::open(&target.path).unwrap()).unwrap();
        assert_eq!(ck.model.weights, model.weights);
        let p1 = predict_proba(&model, val.inputs.view(), 7).unwrap();
        let p2 = predict_proba(&ck.model, val.inputs.view(), 7).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(ck.metadata["epoch"], a.best_epoch);

        let (c, _) = train_fold(&train, &val, 4, &config, 2, None).unwrap();
        assert_ne!(a.curves, c.curves);
    }

    #[test]
    fn prediction_is_batch_invariant() {
        let config = tiny();
        let model = init_params::<f32>(&config.model_config(4), 9).unwrap();
        let (records, _, data) = toy_data(&config);
        let all = predict_proba(&model, data.inputs.view(), 80).unwrap();
        let single = predict_proba(&model, data.inputs.view(), 1).unwrap();
        for (a, b) in all.iter().zip(single.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let seqs: Vec<&str> = records.iter().map(|r| r.sequence.as_str()).collect();
        let preds = predict(&model, &seqs).unwrap();
        assert_eq!(preds.len(), records.len());
        for (p, row) in preds.iter().zip(all.rows()) {
            let sum: f32 = p.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            let top = p.probabilities.iter().cloned().fold(f32::MIN, f32::max);
            assert_eq!(p.probabilities[p.label], top);
            for (x, y) in p.probabilities.iter().zip(row) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_validation_selects_best_fold() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 2,
            ..tiny()
        };
        let (records, labels, _) = toy_data(&config);
        let plan = make_split(&records, 0.2, config.folds, 11).unwrap();
        let out = run_cv(&records, &plan, &labels, &config, Some(dir.path())).unwrap();
        assert_eq!(out.folds.len(), 2);
        let best = out
            .folds
            .iter()
            .map(|f| f.best_val_accuracy)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.folds[out.selected_fold].best_val_accuracy, best);
        for k in 0..2 {
            assert!(dir.path().join(fold_checkpoint_name(k)).exists());
            let curves = std::fs::read_to_string(dir.path().join(fold_curves_name(k))).unwrap();
            assert_eq!(curves.lines().count(), 3);
        }
        let ck =
            load_checkpoint(File::open(dir.path().join(SELECTED_MODEL_NAME)).unwrap()).unwrap();
        assert_eq!(ck.model.weights, out.model.weights);

        let parallel = TrainConfig {
            threads: 2,
            ..config.clone()
        };
        let out2 = run_cv(&records, &plan, &labels, &parallel, None).unwrap();
        assert_eq!(
            out.folds.iter().map(|f| &f.curves).collect::<Vec<_>>(),
            out2.folds.iter().map(|f| &f.curves).collect::<Vec<_>>()
        );

        let wrong = TrainConfig { folds: 3, ..config };
        assert!(run_cv(&records, &plan, &labels, &wrong, None).is_err());
    }
}
