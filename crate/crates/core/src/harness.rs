//! Fold training, snapshot-ensemble prediction and leave-one-subject-out
//! evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, mix_seed, AugmentedDataset};
use crate::config::RunConfig;
use crate::dataset::{load_dhg, loocv_folds, resample_to_window, FoldSplit, SkeletonSequence, FEATURES};
use crate::error::{Error, Result};
use crate::fusion::Distillation;
use crate::model::{joint_training_step, GestureModel, StepLosses};
use crate::ops::softmax_tensor;
use crate::optim::AdamW;
use crate::report::{EvaluationReport, FoldReport, FUSION};
use crate::snapshot::{list_snapshots, load_snapshot, save_snapshot, SnapshotMeta};
use crate::synth::{generate, SynthSpec};
use crate::tensor::Tensor;

/// Originals, their augmentation and the fold splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub originals: Vec<SkeletonSequence>,
    pub augmented: AugmentedDataset,
    pub folds: Vec<FoldSplit>,
}

impl PreparedData {
    pub fn from_sequences(config: &RunConfig, originals: Vec<SkeletonSequence>) -> Result<Self> {
        if let Some(s) = originals.iter().find(|s| s.label14() >= config.model.num_classes) {
            return Err(Error::Config(format!(
                "gesture {} exceeds the configured {} classes",
                s.gesture, config.model.num_classes
            )));
        }
        let augmented = augment_dataset(&originals, config.augment_factor, mix_seed(config.seed, 0xA06))?;
        let folds = loocv_folds(&originals, &augmented)?;
        Ok(Self { originals, augmented, folds })
    }

    pub fn fold(&self, held_out: u8) -> Result<&FoldSplit> {
        self.folds
            .iter()
            .find(|f| f.held_out == held_out)
            .ok_or(Error::MissingSubject(held_out))
    }

    /// `[n, window, 66]` windows of augmented records.
    pub fn augmented_windows(&self, indices: &[usize], window: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * window * FEATURES);
        for &i in indices {
            let seq = self.augmented.materialize(&self.originals, i)?;
            data.extend_from_slice(resample_to_window(&seq, window)?.data());
        }
        Tensor::new(&[indices.len(), window, FEATURES], data)
    }

    /// `[n, window, 66]` windows of original sequences.
    pub fn original_windows(&self, indices: &[usize], window: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * window * FEATURES);
        for &i in indices {
            data.extend_from_slice(resample_to_window(&self.originals[i], window)?.data());
        }
        Tensor::new(&[indices.len(), window, FEATURES], data)
    }
}

/// Loads the dataset named by `config.data`, or generates the synthetic one.
pub fn prepare(config: &RunConfig) -> Result<PreparedData> {
    let originals = match &config.data {
        Some(root) => load_dhg(root, None)?.sequences,
        None => generate(&SynthSpec::new(
            config.model.num_classes,
            config.synth_subjects,
            config.synth_trials,
            config.seed,
        ))?,
    };
    PreparedData::from_sequences(config, originals)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based global epoch.
    pub epoch: usize,
    /// 1-based cycle.
    pub cycle: usize,
    pub lr: f64,
    /// Batch-size-weighted mean losses over the epoch.
    pub losses: StepLosses,
    /// Fusion accuracy on the augmented held-out records.
    pub validation_accuracy: f64,
    pub batches: Vec<StepLosses>,
}

#[derive(Clone, Debug)]
pub struct FoldTraining {
    pub held_out: u8,
    pub snapshots: Vec<PathBuf>,
    pub epochs: Vec<EpochLog>,
}

pub fn fold_dir(out: &Path, held_out: u8) -> PathBuf {
    out.join(format!("fold_{held_out:02}"))
}

pub fn snapshot_root(out: &Path, held_out: u8) -> PathBuf {
    fold_dir(out, held_out).join("snapshots")
}

fn fold_seed(config: &RunConfig, held_out: u8) -> u64 {
    mix_seed(config.seed, 0xF01D_0000 + held_out as u64)
}

fn distillation(config: &RunConfig) -> Distillation {
    if config.distill {
        Distillation::new(config.temperature)
    } else {
        Distillation::without_kd(config.temperature)
    }
}

fn predict_in_batches(model: &GestureModel, windows: &Tensor, batch: usize) -> Result<[Tensor; 4]> {
    let n = windows.shape()[0];
    let per = windows.numel() / n;
    let mut parts: [Vec<f64>; 4] = Default::default();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let chunk = Tensor::new(
            &[len, windows.shape()[1], windows.shape()[2]],
            windows.data()[start * per..(start + len) * per].to_vec(),
        )?;
        for (p, l) in parts.iter_mut().zip(model.predict_logits(&chunk)?) {
            p.extend_from_slice(l.data());
        }
        start += len;
    }
    let c = model.config.num_classes;
    let [a, b, f, e] = parts;
    Ok([
        Tensor::new(&[n, c], a)?,
        Tensor::new(&[n, c], b)?,
        Tensor::new(&[n, c], f)?,
        Tensor::new(&[n, c], e)?,
    ])
}

/// Class probabilities `[transformer, onlstm, fusion, ensemble]` of one
/// model: softmax of each classifier's logits.
pub fn predict_probabilities(model: &GestureModel, windows: &Tensor) -> Result<[Tensor; 4]> {
    let logits = predict_in_batches(model, windows, 256)?;
    Ok(logits.map(|l| softmax_tensor(&l, 1)))
}

/// Mean of per-snapshot probabilities, per classifier.
pub fn ensemble_probabilities(members: &[[Tensor; 4]]) -> Result<[Tensor; 4]> {
    let Some(first) = members.first() else {
        return Err(Error::InvalidArgument("empty snapshot set".into()));
    };
    let mut out = first.clone();
    for m in &members[1..] {
        for (acc, p) in out.iter_mut().zip(m) {
            if acc.shape() != p.shape() {
                return Err(Error::InvalidArgument("snapshot probability shapes differ".into()));
            }
            acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
        }
    }
    let k = members.len() as f64;
    for acc in out.iter_mut() {
        acc.data_mut().iter_mut().for_each(|a| *a /= k);
    }
    Ok(out)
}

/// Snapshot-set prediction: averaged probabilities, then argmax.
pub fn predict(models: &[GestureModel], windows: &Tensor) -> Result<[Vec<usize>; 4]> {
    let members = models
        .iter()
        .map(|m| predict_probabilities(m, windows))
        .collect::<Result<Vec<_>>>()?;
    Ok(ensemble_probabilities(&members)?.map(|p| p.argmax_rows()))
}

/// Trains one fold, saving a snapshot at the end of every cycle under
/// `snapshot_root(out, fold)`. A non-finite loss aborts the fold; snapshots
/// of completed cycles stay on disk.
pub fn train_fold(config: &RunConfig, data: &PreparedData, held_out: u8) -> Result<FoldTraining> {
    config.validate()?;
    let fold = data.fold(held_out)?;
    if fold.train.is_empty() {
        return Err(Error::EmptyDataset(format!("fold {held_out} has no training records")));
    }
    let root = snapshot_root(&config.out, held_out);
    if root.exists() {
        return Err(Error::Snapshot(format!(
            "{} already exists; snapshots are never overwritten, choose a new output directory",
            root.display()
        )));
    }
    let seed = fold_seed(config, held_out);
    let window = config.window();
    let kd = distillation(config);
    let mut model = GestureModel::new(config.model.clone(), seed)?;
    let mut optimizer = AdamW::new(config.optimizer)?;
    let validation = data.augmented_windows(&fold.validation, window)?;
    let val_labels: Vec<usize> = fold.validation.iter().map(|&i| data.augmented.records[i].label14()).collect();
    let mut order = fold.train.clone();
    let mut epochs = Vec::new();
    let mut snapshots = Vec::new();
    let started = Instant::now();

    for (e, slot) in config.schedule().epochs()?.into_iter().enumerate() {
        let epoch = e + 1;
        order.clone_from(&fold.train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
        let mut batches = Vec::new();
        let mut sums = [0.0; 3];
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.augmented_windows(idx, window)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.augmented.records[i].label14()).collect();
            let dropout_seed = mix_seed(seed, ((epoch as u64) << 32) | b as u64);
            let losses = joint_training_step(&mut model, &mut optimizer, &x, &y, kd, slot.lr, dropout_seed)
                .map_err(|err| match err {
                    Error::NonFinite { op } => Error::NonFinite {
                        op: format!(
                            "{op} (fold {held_out}, epoch {epoch}, batch {b}; {} cycle snapshot(s) retained)",
                            snapshots.len()
                        ),
                    },
                    other => other,
                })?;
            let w = idx.len() as f64;
            sums[0] += losses.transformer * w;
            sums[1] += losses.onlstm * w;
            sums[2] += losses.fusion * w;
            batches.push(losses);
        }
        let n = order.len() as f64;
        let losses = StepLosses { transformer: sums[0] / n, onlstm: sums[1] / n, fusion: sums[2] / n };
        let validation_accuracy = if val_labels.is_empty() {
            f64::NAN
        } else {
            let preds = predict_in_batches(&model, &validation, 256)?[FUSION].argmax_rows();
            preds.iter().zip(&val_labels).filter(|(p, l)| p == l).count() as f64 / val_labels.len() as f64
        };
        log::info!(
            "fold {held_out} epoch {epoch} cycle {} lr {:.6} L_t {:.4} L_o {:.4} L_f {:.4} val {:.3} ({:.1}s)",
            slot.cycle + 1,
            slot.lr,
            losses.transformer,
            losses.onlstm,
            losses.fusion,
            validation_accuracy,
            started.elapsed().as_secs_f64()
        );
        epochs.push(EpochLog { epoch, cycle: slot.cycle + 1, lr: slot.lr, losses, validation_accuracy, batches });
        if slot.ends_cycle {
            let meta = SnapshotMeta { cycle: slot.cycle + 1, epoch, seed, model: config.model.clone() };
            snapshots.push(save_snapshot(&root, &model.store, &meta)?);
        }
    }

    let log_path = fold_dir(&config.out, held_out).join("train_log.csv");
    let mut csv = String::from("epoch,cycle,lr,loss_transformer,loss_onlstm,loss_fusion,validation_accuracy\n");
    for e in &epochs {
        csv.push_str(&format!(
            "{},{},{:e},{:.9},{:.9},{:.9},{:.6}\n",
            e.epoch, e.cycle, e.lr, e.losses.transformer, e.losses.onlstm, e.losses.fusion, e.validation_accuracy
        ));
    }
    std::fs::write(log_path, csv)?;
    Ok(FoldTraining { held_out, snapshots, epochs })
}

/// Scores every cycle snapshot and their ensemble on the fold's original
/// test sequences. Reads snapshots only.
pub fn evaluate_fold(config: &RunConfig, data: &PreparedData, held_out: u8) -> Result<FoldReport> {
    let fold = data.fold(held_out)?;
    let dirs = list_snapshots(&snapshot_root(&config.out, held_out))?;
    let windows = data.original_windows(&fold.test, config.window())?;
    let labels: Vec<usize> = fold.test.iter().map(|&i| data.originals[i].label14()).collect();
    let mut members = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let (model, _) = load_snapshot(d)?;
        if model.config != config.model {
            return Err(Error::Snapshot(format!(
                "{} was trained with a different model configuration",
                d.display()
            )));
        }
        members.push(predict_probabilities(&model, &windows)?);
    }
    let ensemble = ensemble_probabilities(&members)?;
    let predictions = (0..4)
        .map(|c| {
            members
                .iter()
                .chain(std::iter::once(&ensemble))
                .map(|m| m[c].argmax_rows())
                .collect()
        })
        .collect();
    Ok(FoldReport { held_out, labels, predictions })
}

/// Held-out subjects selected by the config.
pub fn selected_folds(config: &RunConfig, data: &PreparedData) -> Result<Vec<u8>> {
    if config.folds.is_empty() {
        return Ok(data.folds.iter().map(|f| f.held_out).collect());
    }
    for &k in &config.folds {
        data.fold(k)?;
    }
    Ok(config.folds.clone())
}

/// Builds the report from existing snapshots of the selected folds.
pub fn evaluate_run(config: &RunConfig, data: &PreparedData) -> Result<EvaluationReport> {
    let folds = selected_folds(config, data)?
        .into_iter()
        .map(|k| evaluate_fold(config, data, k))
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_folds(config.model.num_classes, config.num_cycles, folds)
}

#[derive(Clone, Debug)]
pub struct LoocvRun {
    pub report: EvaluationReport,
    pub training: Vec<FoldTraining>,
}

/// Trains and evaluates every selected fold, then writes the config and
/// the report files into `config.out`.
pub fn run_loocv(config: &RunConfig) -> Result<LoocvRun> {
    config.validate()?;
    let data = prepare(config)?;
    std::fs::create_dir_all(&config.out)?;
    std::fs::write(config.out.join("config.txt"), config.render())?;
    let mut training = Vec::new();
    for k in selected_folds(config, &data)? {
        training.push(train_fold(config, &data, k)?);
    }
    let report = evaluate_run(config, &data)?;
    report.write_all(&config.out)?;
    Ok(LoocvRun { report, training })
}
