//! End-to-end supervised fine-tuning of a pretrained arm.
//!
//! The whole network trains (no frozen backbone) under a class-distribution
//! normalized focal loss, Adam with a single cosine anneal from the base
//! rate to zero, and early stopping on validation loss. Label-fraction
//! subsetting draws a stratified portion of the train split; the test split
//! is guarded by an access counter that must stay at zero until the final
//! evaluation.

use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arms::{build_arm, divergence_abort, load_checkpoint, save_checkpoint, Arm, TapFlags};
use crate::augment::resize_bilinear;
use crate::data::{apportion, stack_images, LabeledImageDataset, Label, Split, TaskKind};
use crate::error::{CassError, Result};
use crate::loss::EmbeddingBatch;
use crate::metrics::{balanced_accuracy, f1_macro, f1_macro_multilabel, MetricReport};
use crate::optim::{cosine_anneal, Adam};
use crate::record::{deterministic_run_id, CostCounters, RunRecord, RunStatus};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    MinmaxLiteral,
    MinmaxInverse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Fraction of the train split whose labels are available.
    pub label_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub weight_mode: WeightMode,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            label_fraction: 1.0,
            max_epochs: 50,
            patience: 5,
            lr: 3e-4,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            weight_mode: WeightMode::MinmaxLiteral,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(CassError::Config(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.patience >= self.max_epochs {
            return Err(CassError::Config(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(CassError::Config(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || self.focal_gamma < 0.0
            || self.focal_alpha <= 0.0
        {
            return Err(CassError::Config(
                "lr must be non-negative, gamma >= 0, alpha > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

/// Min-max normalized class weights from per-class counts.
///
/// Literal mode: `w_c = (n_c - min) / (max - min)`; all-equal counts give
/// all ones. Inverse mode applies the same map to `max + min - n_c`, so
/// literal and inverse weights sum to 1 per class whenever `min != max`.
pub fn class_weights(counts: &[usize], mode: WeightMode) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(CassError::Contract("class counts are empty".into()));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(CassError::Contract(
            "class weights need at least one nonzero count".into(),
        ));
    }
    let min = *counts.iter().min().unwrap() as f64;
    let max = *counts.iter().max().unwrap() as f64;
    let weights = if min == max {
        vec![1.0; counts.len()]
    } else {
        counts
            .iter()
            .map(|&c| {
                let n = match mode {
                    WeightMode::MinmaxLiteral => c as f64,
                    WeightMode::MinmaxInverse => max + min - c as f64,
                };
                (n - min) / (max - min)
            })
            .collect()
    };
    Ok(ClassWeights { weights })
}

/// Targets for one batch, matching the dataset's task kind.
pub enum TargetBatch<'a> {
    Multiclass(&'a [usize]),
    Multilabel(&'a [Vec<u8>]),
}

impl TargetBatch<'_> {
    fn len(&self) -> usize {
        match self {
            TargetBatch::Multiclass(t) => t.len(),
            TargetBatch::Multilabel(t) => t.len(),
        }
    }
}

/// Class-distribution normalized focal loss, batch mean.
///
/// Multiclass: `-alpha * w_y * (1 - p_y)^gamma * ln(p_y)` with a softmax
/// over the logits. Multilabel: the per-class sigmoid focal term summed
/// over classes, each scaled by its class weight. `gamma = 0` with unit
/// weights reduces to plain cross-entropy.
pub fn focal_loss(
    logits: &EmbeddingBatch,
    targets: &TargetBatch,
    w: &ClassWeights,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    focal_loss_grad(logits, targets, w, gamma, alpha).map(|(loss, _)| loss)
}

/// Focal loss plus its gradient with respect to the logits.
pub fn focal_loss_grad(
    logits: &EmbeddingBatch,
    targets: &TargetBatch,
    w: &ClassWeights,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.batch_size(), logits.dim());
    if w.weights.len() != c {
        return Err(CassError::Contract(format!(
            "{} class weights for {} logit columns",
            w.weights.len(),
            c
        )));
    }
    if targets.len() != b {
        return Err(CassError::Contract(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    if gamma < 0.0 || alpha <= 0.0 {
        return Err(CassError::Contract("need gamma >= 0 and alpha > 0".into()));
    }
    let z = logits.values.data();
    let mut grad = Tensor::zeros(logits.values.shape());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;

    match targets {
        TargetBatch::Multiclass(ts) => {
            for (i, &y) in ts.iter().enumerate() {
                if y >= c {
                    return Err(CassError::Contract(format!(
                        "target class {y} out of range for {c} classes"
                    )));
                }
                let row = &z[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                let p: Vec<f64> = row.iter().map(|&v| (v - lse).exp()).collect();
                let py = p[y];
                let wy = alpha * w.weights[y];

                let g_row = &mut grad.data_mut()[i * c..(i + 1) * c];
                if gamma == 0.0 {
                    total += -wy * (py.max(1e-300)).ln();
                    // d(-ln p_y)/dz_j = p_j - [j == y]
                    for j in 0..c {
                        g_row[j] = wy * (p[j] - if j == y { 1.0 } else { 0.0 }) * inv_b;
                    }
                } else {
                    let pyc = py.clamp(1e-300, 1.0);
                    let q = (1.0 - py).max(0.0);
                    total += -wy * q.powf(gamma) * pyc.ln();
                    // dL/dp_y, then chain through dp_y/dz_j = p_y([j==y] - p_j).
                    let dl_dpy = wy * (gamma * q.powf(gamma - 1.0) * pyc.ln() - q.powf(gamma) / pyc);
                    for j in 0..c {
                        let dpy_dzj = py * (if j == y { 1.0 } else { 0.0 } - p[j]);
                        g_row[j] = dl_dpy * dpy_dzj * inv_b;
                    }
                }
            }
        }
        TargetBatch::Multilabel(ts) => {
            for (i, bits) in ts.iter().enumerate() {
                if bits.len() != c {
                    return Err(CassError::Contract(format!(
                        "multi-hot target has {} bits for {c} classes",
                        bits.len()
                    )));
                }
                let row = &z[i * c..(i + 1) * c];
                let g_row = &mut grad.data_mut()[i * c..(i + 1) * c];
                for j in 0..c {
                    let p = 1.0 / (1.0 + (-row[j]).exp());
                    let y = bits[j] != 0;
                    let pt = if y { p } else { 1.0 - p };
                    let wj = alpha * w.weights[j];
                    let ptc = pt.clamp(1e-300, 1.0);
                    let q = (1.0 - pt).max(0.0);
                    let (term, dterm_dpt) = if gamma == 0.0 {
                        (-ptc.ln(), -1.0 / ptc)
                    } else {
                        (
                            -q.powf(gamma) * ptc.ln(),
                            gamma * q.powf(gamma - 1.0) * ptc.ln() - q.powf(gamma) / ptc,
                        )
                    };
                    total += wj * term;
                    // dp_t/dp = +1 for positive targets, -1 otherwise;
                    // dp/dz = p (1 - p).
                    let dpt_dz = (if y { 1.0 } else { -1.0 }) * p * (1.0 - p);
                    g_row[j] = wj * dterm_dpt * dpt_dz * inv_b;
                }
            }
        }
    }
    Ok((total * inv_b, grad))
}

/// Stratified label subset of the train split: `round(fraction * N)`
/// samples, each class keeping at least one when it is large enough.
/// Deterministic per seed; `fraction = 1` returns the full train split.
pub fn subset_labels(
    dataset: &LabeledImageDataset,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CassError::Config(format!(
            "label fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(CassError::Config(
            "dataset has no train split; call split() first".into(),
        ));
    }
    let total = (fraction * train.len() as f64).round() as usize;
    if total == 0 {
        return Err(CassError::Config(format!(
            "fraction {fraction} of {} train samples rounds to zero",
            train.len()
        )));
    }
    if fraction == 1.0 {
        return Ok(train);
    }

    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in &train {
        by_class
            .entry(dataset.samples[i].label.primary_class())
            .or_default()
            .push(i);
    }
    let counts: Vec<usize> = by_class.values().map(|v| v.len()).collect();
    let quotas = apportion(&counts, total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subset = Vec::with_capacity(total);
    for (pool, &quota) in by_class.values_mut().zip(&quotas) {
        pool.shuffle(&mut rng);
        subset.extend_from_slice(&pool[..quota]);
    }
    subset.sort_unstable();
    Ok(subset)
}

/// Validation-loss early stopping with "no improvement" patience.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    bad_epochs: usize,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
            best_epoch: 0,
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss; returns true when training
    /// should stop after this epoch.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            false
        } else {
            self.bad_epochs += 1;
            self.bad_epochs >= self.patience
        }
    }
}

/// Dataset view that counts every sample access per split, backing the
/// test-isolation audit.
pub struct SplitAuditor<'a> {
    dataset: &'a LabeledImageDataset,
    reads: [Cell<u64>; 3],
}

impl<'a> SplitAuditor<'a> {
    pub fn new(dataset: &'a LabeledImageDataset) -> Result<SplitAuditor<'a>> {
        if dataset.split_assignment.is_none() {
            return Err(CassError::Config(
                "fine-tuning needs a dataset with assigned splits".into(),
            ));
        }
        Ok(SplitAuditor {
            dataset,
            reads: [Cell::new(0), Cell::new(0), Cell::new(0)],
        })
    }

    fn slot(split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn sample(&self, i: usize) -> &crate::data::Sample {
        let split = self.dataset.split_assignment.as_ref().unwrap()[i];
        let slot = Self::slot(split);
        self.reads[slot].set(self.reads[slot].get() + 1);
        &self.dataset.samples[i]
    }

    pub fn reads(&self, split: Split) -> u64 {
        self.reads[Self::slot(split)].get()
    }
}

/// Everything a fine-tuning run produces.
pub struct FinetuneOutcome {
    pub model: Arm,
    pub test_metrics: Vec<MetricReport>,
    pub record: RunRecord,
    pub checkpoint: PathBuf,
    /// Value of the test-split access counter when training finished;
    /// zero means the test data stayed untouched until evaluation.
    pub test_reads_during_training: u64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub val_curve: Vec<f64>,
}

/// Rebuilds `source` with a classification head of `classes` outputs,
/// copying every backbone tensor and freshly initializing the head.
pub fn reshape_head(source: &Arm, classes: usize, seed: u64) -> Result<Arm> {
    if classes == 0 {
        return Err(CassError::Contract("need at least one class".into()));
    }
    let mut spec = source.spec.clone();
    spec.head_dim = classes;
    spec.init = crate::arms::InitKind::Random;
    let mut arm = build_arm(&spec, seed)?;
    let src = source.store();
    for p in arm.store_mut().iter_mut() {
        if p.name.starts_with("head.") {
            continue;
        }
        let sid = src.find(&p.name).ok_or_else(|| {
            CassError::Contract(format!("source arm lacks tensor '{}'", p.name))
        })?;
        let sv = src.value(sid);
        if sv.shape() != p.value.shape() {
            return Err(CassError::Contract(format!(
                "tensor '{}' shape {:?} vs {:?} during head reshape",
                p.name,
                sv.shape(),
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(sv.data());
    }
    Ok(arm)
}

fn targets_of(samples: &[&crate::data::Sample], kind: TaskKind) -> (Vec<usize>, Vec<Vec<u8>>) {
    let mut classes = Vec::new();
    let mut hots = Vec::new();
    for s in samples {
        match (&s.label, kind) {
            (Label::Class(c), _) => classes.push(*c),
            (Label::MultiHot(bits), _) => hots.push(bits.clone()),
        }
    }
    (classes, hots)
}

fn batch_of(auditor: &SplitAuditor, indices: &[usize], hw: (usize, usize)) -> Result<(Tensor, Vec<usize>, Vec<Vec<u8>>)> {
    let samples: Vec<&crate::data::Sample> = indices.iter().map(|&i| auditor.sample(i)).collect();
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            if (sh[1], sh[2]) == hw {
                s.image.clone()
            } else {
                resize_bilinear(&s.image, hw.0, hw.1)
            }
        })
        .collect();
    let kind = auditor.dataset.task_kind;
    let (classes, hots) = targets_of(&samples, kind);
    Ok((stack_images(&images)?, classes, hots))
}

fn loss_on(
    arm: &Arm,
    auditor: &SplitAuditor,
    indices: &[usize],
    weights: &ClassWeights,
    cfg: &FinetuneConfig,
    counters: &mut CostCounters,
) -> Result<f64> {
    let kind = auditor.dataset.task_kind;
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in indices.chunks(cfg.batch_size) {
        let (batch, classes, hots) = batch_of(auditor, chunk, arm.spec.input_hw)?;
        let (out, _) = arm
            .forward(&batch, TapFlags::none())
            .map_err(|e| divergence_abort(e, "(validation)"))?;
        counters.forward_passes += 1;
        let targets = match kind {
            TaskKind::Multiclass => TargetBatch::Multiclass(&classes),
            TaskKind::Multilabel => TargetBatch::Multilabel(&hots),
        };
        total += focal_loss(&out.logits, &targets, weights, cfg.focal_gamma, cfg.focal_alpha)?;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Argmax (multiclass) or sigmoid-threshold (multilabel) predictions.
/// Predicted classes, predicted one-hots, true classes, true one-hots.
pub type Predictions = (Vec<usize>, Vec<Vec<u8>>, Vec<usize>, Vec<Vec<u8>>);

pub fn predict(
    arm: &Arm,
    auditor: &SplitAuditor,
    indices: &[usize],
    batch_size: usize,
    counters: &mut CostCounters,
) -> Result<Predictions> {
    let kind = auditor.dataset.task_kind;
    let c = auditor.dataset.num_classes();
    let mut pred_classes = Vec::new();
    let mut pred_hots = Vec::new();
    let mut true_classes = Vec::new();
    let mut true_hots = Vec::new();
    for chunk in indices.chunks(batch_size) {
        let (batch, classes, hots) = batch_of(auditor, chunk, arm.spec.input_hw)?;
        let (out, _) = arm.forward(&batch, TapFlags::none())?;
        counters.forward_passes += 1;
        let z = out.logits.values.data();
        for i in 0..chunk.len() {
            let row = &z[i * c..(i + 1) * c];
            match kind {
                TaskKind::Multiclass => {
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap();
                    pred_classes.push(argmax);
                }
                TaskKind::Multilabel => {
                    pred_hots.push(row.iter().map(|&v| u8::from(v > 0.0)).collect());
                }
            }
        }
        true_classes.extend(classes);
        true_hots.extend(hots);
    }
    Ok((pred_classes, pred_hots, true_classes, true_hots))
}

/// Fine-tunes a checkpointed arm end to end on the labeled dataset.
pub fn finetune(
    checkpoint: &Path,
    dataset: &LabeledImageDataset,
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    let (arm, _) = load_checkpoint(checkpoint)?;
    finetune_arm(arm, dataset, cfg, out_dir, Some(checkpoint))
}

/// Fine-tunes an in-memory arm (e.g. a random-init control) end to end.
///
/// The head is resized to the dataset's class count before training; all
/// parameters receive gradients. Training sees only the label subset of the
/// train split plus validation losses; the test split is first touched by
/// the final evaluation, as witnessed by the access audit.
pub fn finetune_arm(
    source: Arm,
    dataset: &LabeledImageDataset,
    cfg: &FinetuneConfig,
    out_dir: &Path,
    source_checkpoint: Option<&Path>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let classes = dataset.num_classes();
    if classes < 2 {
        return Err(CassError::Config("need at least two classes".into()));
    }
    let auditor = SplitAuditor::new(dataset)?;
    let mut arm = reshape_head(&source, classes, cfg.seed)?;
    if arm.spec.head_dim != classes {
        return Err(CassError::Contract(format!(
            "head outputs {} after resize, dataset has {classes} classes",
            arm.spec.head_dim
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let subset = subset_labels(dataset, cfg.label_fraction, cfg.seed)?;
    let val = dataset.indices(Split::Val);
    if val.is_empty() {
        return Err(CassError::Config("validation split is empty".into()));
    }

    // Weights come from the training subset's label counts only.
    let counts = match dataset.task_kind {
        TaskKind::Multiclass => dataset.class_counts(&subset),
        TaskKind::Multilabel => {
            let mut c = vec![0usize; classes];
            for &i in &subset {
                if let Label::MultiHot(bits) = &dataset.samples[i].label {
                    for (k, &b) in bits.iter().enumerate() {
                        c[k] += b as usize;
                    }
                }
            }
            c
        }
    };
    let weights = class_weights(&counts, cfg.weight_mode)?;

    let snapshot = serde_json::json!({
        "method": "finetune",
        "finetune": cfg,
        "arm": arm.spec,
        "classes": classes,
        "class_weights": weights,
        "source_checkpoint": source_checkpoint.map(|p| p.display().to_string()),
    });
    let run_id = deterministic_run_id("finetune", cfg.seed, &snapshot);
    let started = Instant::now();

    let mut counters = CostCounters::default();
    let mut optimizer = Adam::new(arm.store());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_weights: Vec<Vec<f64>> = Vec::new();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stopped_epoch = 0;

    let loop_result = (|| -> Result<()> {
        for epoch in 1..=cfg.max_epochs {
            stopped_epoch = epoch;
            let lr = cosine_anneal(epoch as u64 - 1, cfg.lr, 0.0, cfg.max_epochs as u64);

            let mut order = subset.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let (batch, classes_t, hots) = batch_of(&auditor, chunk, arm.spec.input_hw)?;
                let (out, cache) = arm
                    .forward(&batch, TapFlags::none())
                    .map_err(|e| divergence_abort(e, &format!("(epoch {epoch})")))?;
                counters.forward_passes += 1;
                let targets = match dataset.task_kind {
                    TaskKind::Multiclass => TargetBatch::Multiclass(&classes_t),
                    TaskKind::Multilabel => TargetBatch::Multilabel(&hots),
                };
                let (loss, grad) = focal_loss_grad(
                    &out.logits,
                    &targets,
                    &weights,
                    cfg.focal_gamma,
                    cfg.focal_alpha,
                )?;
                if !loss.is_finite() {
                    return Err(CassError::Aborted(format!(
                        "fine-tune loss became non-finite at epoch {epoch}"
                    )));
                }
                arm.store_mut().zero_grads();
                arm.backward(&cache, &grad);
                optimizer.step(arm.store_mut(), lr)?;
                epoch_loss += loss;
                batches += 1;
            }
            train_curve.push(epoch_loss / batches as f64);

            let val_loss = loss_on(&arm, &auditor, &val, &weights, cfg, &mut counters)?;
            val_curve.push(val_loss);
            let improved = val_loss < stopper.best_loss();
            let stop = stopper.observe(epoch, val_loss);
            if improved {
                best_weights = arm.store().iter().map(|p| p.value.data().to_vec()).collect();
            }
            if stop {
                break;
            }
        }
        Ok(())
    })();

    if let Err(err) = loop_result {
        let record = RunRecord {
            run_id,
            method: "finetune".into(),
            seed: cfg.seed,
            config_snapshot: snapshot,
            loss_curve: train_curve,
            counters,
            wall_clock_seconds: [("finetune".to_string(), started.elapsed().as_secs_f64())]
                .into_iter()
                .collect(),
            metrics: Vec::new(),
            checkpoints: Vec::new(),
            status: RunStatus::Aborted {
                reason: err.to_string(),
            },
        };
        record.save(&out_dir.join("finetune_record.json"))?;
        return Err(err);
    }

    // Restore the best-validation weights before touching the test split.
    if !best_weights.is_empty() {
        for (p, saved) in arm.store_mut().iter_mut().zip(&best_weights) {
            p.value.data_mut().copy_from_slice(saved);
        }
    }
    let test_reads_during_training = auditor.reads(Split::Test);
    let train_wall = started.elapsed().as_secs_f64();

    let eval_started = Instant::now();
    let test = dataset.indices(Split::Test);
    let (pred_c, pred_h, true_c, true_h) =
        predict(&arm, &auditor, &test, cfg.batch_size, &mut counters)?;
    let test_metrics = match dataset.task_kind {
        TaskKind::Multiclass => vec![
            f1_macro(&pred_c, &true_c, classes)?,
            balanced_accuracy(&pred_c, &true_c, classes)?,
        ],
        TaskKind::Multilabel => vec![f1_macro_multilabel(&pred_h, &true_h)?],
    };
    let eval_wall = eval_started.elapsed().as_secs_f64();

    let ckpt_path = out_dir.join("finetuned.ckpt");
    save_checkpoint(&arm, stopper.best_epoch as u64, false, &ckpt_path)?;

    let record = RunRecord {
        run_id,
        method: "finetune".into(),
        seed: cfg.seed,
        config_snapshot: snapshot,
        loss_curve: train_curve,
        counters,
        wall_clock_seconds: [
            ("finetune".to_string(), train_wall),
            ("evaluate".to_string(), eval_wall),
        ]
        .into_iter()
        .collect(),
        metrics: test_metrics.clone(),
        checkpoints: vec![ckpt_path.display().to_string()],
        status: RunStatus::Completed,
    };
    record.save(&out_dir.join("finetune_record.json"))?;

    Ok(FinetuneOutcome {
        model: arm,
        test_metrics,
        record,
        checkpoint: ckpt_path,
        test_reads_during_training,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
        val_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arms::{build_arm, ArmSpec, Family};
    use crate::data::{synth_dataset, SynthConfig};
    use crate::gradcheck::central_diff;
    use crate::loss::ArmTag;
    use tempfile::tempdir;

    fn logits_of(rows: usize, cols: usize, data: Vec<f64>) -> EmbeddingBatch {
        let t = Tensor::from_vec(&[rows, cols], data).unwrap();
        EmbeddingBatch::new(t, ArmTag::Cnn).unwrap()
    }

    fn unit_weights(c: usize) -> ClassWeights {
        ClassWeights {
            weights: vec![1.0; c],
        }
    }

    #[test]
    fn class_weights_literal_oracle() {
        let w = class_weights(&[10, 20, 30], WeightMode::MinmaxLiteral).unwrap();
        assert_eq!(w.weights, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn class_weights_inverse_oracle_and_complement() {
        let inv = class_weights(&[10, 20, 30], WeightMode::MinmaxInverse).unwrap();
        assert_eq!(inv.weights, vec![1.0, 0.5, 0.0]);
        let counts = [7usize, 3, 11, 9, 3];
        let lit = class_weights(&counts, WeightMode::MinmaxLiteral).unwrap();
        let inv = class_weights(&counts, WeightMode::MinmaxInverse).unwrap();
        for (l, i) in lit.weights.iter().zip(&inv.weights) {
            assert!((l + i - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn class_weights_equal_counts_give_ones() {
        let w = class_weights(&[5, 5, 5, 5], WeightMode::MinmaxLiteral).unwrap();
        assert_eq!(w.weights, vec![1.0; 4]);
        let w = class_weights(&[5, 5], WeightMode::MinmaxInverse).unwrap();
        assert_eq!(w.weights, vec![1.0; 2]);
    }

    #[test]
    fn class_weights_reject_degenerate_counts() {
        assert!(class_weights(&[], WeightMode::MinmaxLiteral).is_err());
        assert!(class_weights(&[0, 0, 0], WeightMode::MinmaxLiteral).is_err());
    }

    #[test]
    fn focal_gamma_zero_matches_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (b, c) = (4, 5);
            let data: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let logits = logits_of(b, c, data.clone());
            let (loss, _) = focal_loss_grad(
                &logits,
                &TargetBatch::Multiclass(&targets),
                &unit_weights(c),
                0.0,
                1.0,
            )
            .unwrap();

            let mut ce = 0.0;
            for (i, &y) in targets.iter().enumerate() {
                let row = &data[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                ce -= row[y] - max - z.ln();
            }
            ce /= b as f64;
            assert!((loss - ce).abs() < 1e-9, "focal {loss} vs ce {ce}");
        }
    }

    #[test]
    fn focal_single_sample_oracle() {
        // One sample, logits [2, 0, 0], target class 0, gamma 2.
        let logits = logits_of(1, 3, vec![2.0, 0.0, 0.0]);
        let (loss, _) = focal_loss_grad(
            &logits,
            &TargetBatch::Multiclass(&[0]),
            &unit_weights(3),
            2.0,
            1.0,
        )
        .unwrap();
        let p = 2f64.exp() / (2f64.exp() + 2.0);
        let expected = -(1.0 - p).powi(2) * p.ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn focal_loss_vanishes_with_confidence() {
        let easy = logits_of(1, 3, vec![30.0, 0.0, 0.0]);
        let hard = logits_of(1, 3, vec![1.0, 0.0, 0.0]);
        let w = unit_weights(3);
        let t = [0usize];
        let le = focal_loss(&easy, &TargetBatch::Multiclass(&t), &w, 2.0, 1.0).unwrap();
        let lh = focal_loss(&hard, &TargetBatch::Multiclass(&t), &w, 2.0, 1.0).unwrap();
        assert!(le < 1e-12, "confident prediction should cost ~0, got {le}");
        assert!(lh > le);
    }

    #[test]
    fn focal_grad_matches_finite_differences_multiclass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, c) = (3, 4);
        let data: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets = vec![0usize, 2, 3];
        let w = ClassWeights {
            weights: vec![0.3, 1.0, 0.7, 0.5],
        };
        let (_, grad) = focal_loss_grad(
            &logits_of(b, c, data.clone()),
            &TargetBatch::Multiclass(&targets),
            &w,
            2.0,
            1.3,
        )
        .unwrap();
        let fd = central_diff(&data, 1e-6, |x| {
            focal_loss(
                &logits_of(b, c, x.to_vec()),
                &TargetBatch::Multiclass(&targets),
                &w,
                2.0,
                1.3,
            )
            .unwrap()
        });
        for (g, f) in grad.data().iter().zip(&fd) {
            assert!((g - f).abs() < 1e-6, "analytic {g} vs fd {f}");
        }
    }

    #[test]
    fn focal_grad_matches_finite_differences_multilabel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, c) = (3, 4);
        let data: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets = vec![
            vec![1u8, 0, 0, 1],
            vec![0, 1, 0, 0],
            vec![1, 1, 1, 0],
        ];
        let w = ClassWeights {
            weights: vec![0.4, 1.0, 0.6, 0.8],
        };
        let (_, grad) = focal_loss_grad(
            &logits_of(b, c, data.clone()),
            &TargetBatch::Multilabel(&targets),
            &w,
            2.0,
            1.0,
        )
        .unwrap();
        let fd = central_diff(&data, 1e-6, |x| {
            focal_loss(
                &logits_of(b, c, x.to_vec()),
                &TargetBatch::Multilabel(&targets),
                &w,
                2.0,
                1.0,
            )
            .unwrap()
        });
        for (g, f) in grad.data().iter().zip(&fd) {
            assert!((g - f).abs() < 1e-6, "analytic {g} vs fd {f}");
        }
    }

    #[test]
    fn focal_multilabel_gamma_zero_is_binary_cross_entropy() {
        let data = vec![1.2, -0.7, 0.3, -2.0, 0.0, 1.5];
        let targets = vec![vec![1u8, 0, 1], vec![0, 0, 1]];
        let loss = focal_loss(
            &logits_of(2, 3, data.clone()),
            &TargetBatch::Multilabel(&targets),
            &unit_weights(3),
            0.0,
            1.0,
        )
        .unwrap();
        let mut bce = 0.0;
        for (i, bits) in targets.iter().enumerate() {
            for (j, &b) in bits.iter().enumerate() {
                let p = 1.0 / (1.0 + (-data[i * 3 + j]).exp());
                bce -= if b == 1 { p.ln() } else { (1.0 - p).ln() };
            }
        }
        bce /= 2.0;
        assert!((loss - bce).abs() < 1e-9, "{loss} vs {bce}");
    }

    #[test]
    fn early_stopper_monotone_worsening_stops_at_epoch_six() {
        let mut stopper = EarlyStopper::new(5);
        let mut stopped_at = None;
        for epoch in 1..=20 {
            // Strictly increasing from the start: 1.0, 1.1, 1.2, ...
            let val = 1.0 + 0.1 * (epoch - 1) as f64;
            if stopper.observe(epoch, val) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(stopper.best_epoch, 1);
    }

    #[test]
    fn early_stopper_resets_on_improvement() {
        let mut stopper = EarlyStopper::new(2);
        assert!(!stopper.observe(1, 1.0));
        assert!(!stopper.observe(2, 1.1)); // bad 1
        assert!(!stopper.observe(3, 0.9)); // improves, counter resets
        assert!(!stopper.observe(4, 0.95)); // bad 1
        assert!(stopper.observe(5, 0.92)); // bad 2 -> stop
        assert_eq!(stopper.best_epoch, 3);
        assert!((stopper.best_loss() - 0.9).abs() < 1e-15);
    }

    fn split_synth(n: usize, classes: usize, seed: u64) -> LabeledImageDataset {
        let mut ds = synth_dataset(&SynthConfig {
            n,
            classes,
            image_size: 8,
            noise: 0.02,
            ..SynthConfig::default()
        }, seed)
        .unwrap();
        crate::data::split(&mut ds, seed).unwrap();
        ds
    }

    #[test]
    fn subset_labels_rounds_and_stratifies() {
        let ds = split_synth(60, 2, 0);
        let train = ds.indices(Split::Train);
        assert_eq!(train.len(), 42);

        let half = subset_labels(&ds, 0.5, 7).unwrap();
        assert_eq!(half.len(), 21); // round(0.5 * 42)
        let counts = ds.class_counts(&half);
        assert_eq!(counts.iter().sum::<usize>(), 21);
        assert!(counts.iter().all(|&c| c >= 10), "{counts:?}");

        // Small fractions still keep every sufficiently large class.
        let tiny = subset_labels(&ds, 0.1, 7).unwrap();
        assert_eq!(tiny.len(), 4); // round(0.1 * 42)
        assert!(ds.class_counts(&tiny).iter().all(|&c| c >= 1));

        // Deterministic per seed, sensitive to it.
        assert_eq!(subset_labels(&ds, 0.5, 7).unwrap(), half);
        assert_ne!(subset_labels(&ds, 0.5, 8).unwrap(), half);

        // Fraction one is the whole train split.
        let all = subset_labels(&ds, 1.0, 7).unwrap();
        let mut expected = train.clone();
        expected.sort_unstable();
        assert_eq!(all, expected);

        // Subsets only ever contain train indices.
        let train_set: std::collections::HashSet<_> = train.iter().collect();
        assert!(half.iter().all(|i| train_set.contains(i)));
    }

    #[test]
    fn subset_labels_rejects_bad_fractions() {
        let ds = split_synth(60, 2, 0);
        assert!(subset_labels(&ds, 0.0, 0).is_err());
        assert!(subset_labels(&ds, 1.5, 0).is_err());
        assert!(subset_labels(&ds, 0.001, 0).is_err()); // rounds to zero samples
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = FinetuneConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.patience = 50;
        assert!(cfg.validate().is_err()); // patience must be < max_epochs
        cfg = FinetuneConfig {
            label_fraction: 0.0,
            ..FinetuneConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = FinetuneConfig {
            lr: f64::NAN,
            ..FinetuneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reshape_head_copies_backbone_and_resizes_head() {
        let spec = ArmSpec::new(Family::Cnn, "micro_cnn", 16).with_input_hw(8, 8);
        let source = build_arm(&spec, 3).unwrap();
        let resized = reshape_head(&source, 5, 9).unwrap();
        assert_eq!(resized.spec.head_dim, 5);
        for p in resized.store().iter() {
            let src_id = source.store().find(&p.name);
            if p.name.starts_with("head.") {
                assert_ne!(
                    source.store().value(src_id.unwrap()).shape(),
                    p.value.shape(),
                    "head tensor {} should change shape",
                    p.name
                );
            } else {
                let sv = source.store().value(src_id.unwrap());
                assert_eq!(sv.data(), p.value.data(), "backbone tensor {} must copy", p.name);
            }
        }
    }

    #[test]
    fn finetune_smoke_learns_separable_task() {
        let ds = split_synth(60, 2, 0);
        let dir = tempdir().unwrap();

        let spec = ArmSpec::new(Family::Cnn, "micro_cnn", 16).with_input_hw(8, 8);
        let source = build_arm(&spec, 0).unwrap();
        let ckpt = dir.path().join("pretrained.ckpt");
        save_checkpoint(&source, 0, false, &ckpt).unwrap();

        let cfg = FinetuneConfig {
            max_epochs: 30,
            patience: 10,
            lr: 0.02,
            seed: 1,
            ..FinetuneConfig::default()
        };
        let out = finetune(&ckpt, &ds, &cfg, dir.path()).unwrap();

        // The test split stays untouched while training.
        assert_eq!(out.test_reads_during_training, 0);

        let f1 = out
            .test_metrics
            .iter()
            .find(|m| m.metric_name == "f1_macro")
            .unwrap();
        assert!(f1.value > 0.95, "expected near-perfect F1, got {}", f1.value);

        // Returned model carries the best-validation weights: recomputing the
        // validation loss reproduces the minimum of the recorded curve.
        let best = out.val_curve.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((out.val_curve[out.best_epoch - 1] - best).abs() < 1e-15);
        let auditor = SplitAuditor::new(&ds).unwrap();
        let subset = subset_labels(&ds, cfg.label_fraction, cfg.seed).unwrap();
        let weights = class_weights(&ds.class_counts(&subset), cfg.weight_mode).unwrap();
        let val = ds.indices(Split::Val);
        let mut scratch = CostCounters::default();
        let reval = loss_on(&out.model, &auditor, &val, &weights, &cfg, &mut scratch).unwrap();
        assert!(
            (reval - best).abs() < 1e-12,
            "restored model's val loss {reval} vs best recorded {best}"
        );

        // Record round-trips from disk with the run's cost counters.
        let loaded = RunRecord::load(&dir.path().join("finetune_record.json")).unwrap();
        assert_eq!(loaded.method, "finetune");
        assert!(matches!(loaded.status, RunStatus::Completed));
        assert!(loaded.counters.forward_passes > 0);
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn finetune_is_deterministic_per_seed() {
        let ds = split_synth(40, 2, 0);
        let spec = ArmSpec::new(Family::Cnn, "micro_cnn", 8).with_input_hw(8, 8);
        let cfg = FinetuneConfig {
            max_epochs: 6,
            patience: 5,
            lr: 0.01,
            seed: 4,
            ..FinetuneConfig::default()
        };
        let run = |tag: &str| {
            let dir = tempdir().unwrap();
            let source = build_arm(&spec, 0).unwrap();
            let out = finetune_arm(source, &ds, &cfg, &dir.path().join(tag), None).unwrap();
            (out.record.loss_curve.clone(), out.val_curve.clone(), out.record.run_id.clone())
        };
        let a = run("a");
        let b = run("b");
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_multilabel_path_trains() {
        let mut ds = synth_dataset(&SynthConfig {
            n: 40,
            classes: 3,
            image_size: 8,
            noise: 0.02,
            task_kind: TaskKind::Multilabel,
            ..SynthConfig::default()
        }, 0)
        .unwrap();
        crate::data::split(&mut ds, 0).unwrap();
        let dir = tempdir().unwrap();
        let source = build_arm(
            &ArmSpec::new(Family::Cnn, "micro_cnn", 8).with_input_hw(8, 8),
            2,
        )
        .unwrap();
        let cfg = FinetuneConfig {
            max_epochs: 8,
            patience: 7,
            lr: 0.02,
            seed: 2,
            ..FinetuneConfig::default()
        };
        let out = finetune_arm(source, &ds, &cfg, dir.path(), None).unwrap();
        assert_eq!(out.test_reads_during_training, 0);
        assert_eq!(out.test_metrics.len(), 1);
        assert_eq!(out.test_metrics[0].metric_name, "f1_macro");
        let curve = &out.record.loss_curve;
        assert!(
            curve.last().unwrap() < curve.first().unwrap(),
            "training loss should drop: {curve:?}"
        );
    }
}
