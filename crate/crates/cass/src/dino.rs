//! Two-view self-distillation baseline: EMA teacher, centering, sharpening.
//!
//! Kept deliberately minimal (two global views, no multi-crop) because its
//! job is to expose the cost asymmetries against the siamese trainer: at
//! least two augmentations per sample per step instead of one, and a
//! per-step parameter copy from student to teacher instead of none. The
//! teacher never receives gradients; it moves only through [`ema_update`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arms::{build_arm, divergence_abort, save_checkpoint, Arm, TapFlags};
use crate::augment::Augmenter;
use crate::data::{stack_images, LabeledImageDataset, Split};
use crate::error::{CassError, Result};
use crate::optim::{cosine_lr, Adam, Optimizer};
use crate::record::{deterministic_run_id, CostCounters, RunRecord, RunStatus};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DinoConfig {
    /// EMA rate for the teacher parameters.
    pub momentum: f64,
    /// EMA rate for the center vector.
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub views_per_image: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cosine_t: u64,
    pub seed: u64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            momentum: 0.996,
            center_momentum: 0.9,
            student_temp: 0.1,
            teacher_temp: 0.04,
            views_per_image: 2,
            epochs: 100,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-6,
            cosine_t: 16,
            seed: 0,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(CassError::Config(
                "momentum and center_momentum must lie in [0, 1]".into(),
            ));
        }
        if self.student_temp <= 0.0 || self.teacher_temp <= 0.0 {
            return Err(CassError::Config("temperatures must be positive".into()));
        }
        if self.views_per_image < 2 {
            return Err(CassError::Config(
                "self-distillation needs at least 2 views per image".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CassError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.lr_max.is_finite() || !self.lr_min.is_finite() || self.lr_min > self.lr_max {
            return Err(CassError::Config(format!(
                "need finite lr_min <= lr_max, got {} / {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.cosine_t == 0 {
            return Err(CassError::Config("cosine_t must be at least 1".into()));
        }
        Ok(())
    }
}

/// Teacher side of the distillation: same architecture, EMA parameters,
/// plus the output-centering vector.
pub struct TeacherState {
    pub arm: Arm,
    pub center: Vec<f64>,
}

impl TeacherState {
    /// Builds a teacher matching the student and copies the student's
    /// current parameters into it (counted as parameter-copy operations).
    pub fn from_student(student: &Arm, counters: &mut CostCounters) -> Result<TeacherState> {
        let mut arm = build_arm(&student.spec, student.seed)?;
        arm.store_mut().copy_values_from(student.store())?;
        counters.parameter_copy_ops += arm.store().len() as u64;
        Ok(TeacherState {
            center: vec![0.0; student.spec.head_dim],
            arm,
        })
    }
}

/// EMA parameter transfer `teacher <- m * teacher + (1 - m) * student`,
/// counting one copy operation per tensor.
pub fn ema_update(
    teacher: &mut crate::nn::ParamStore,
    student: &crate::nn::ParamStore,
    m: f64,
    counters: &mut CostCounters,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CassError::Contract(format!("EMA rate {m} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(CassError::Contract(format!(
            "teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        if t.value.shape() != s.value.shape() {
            return Err(CassError::Contract(format!(
                "EMA shape mismatch on '{}': {:?} vs {:?}",
                t.name,
                t.value.shape(),
                s.value.shape()
            )));
        }
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    counters.parameter_copy_ops += teacher.len() as u64;
    Ok(())
}

/// Cross-entropy between the student softmax (temperature-scaled) and the
/// centered, sharpened teacher softmax, for one (teacher view, student
/// view) pairing. Returns the batch-mean loss and its gradient with respect
/// to the student logits.
pub fn dino_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    center: &[f64],
    student_temp: f64,
    teacher_temp: f64,
) -> Result<(f64, Tensor)> {
    let shape = student_logits.shape();
    if shape.len() != 2 || teacher_logits.shape() != shape {
        return Err(CassError::Contract(format!(
            "logit shapes must match and be rank 2, got {:?} vs {:?}",
            shape,
            teacher_logits.shape()
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    if center.len() != d {
        return Err(CassError::Contract(format!(
            "center has dim {}, logits have {}",
            center.len(),
            d
        )));
    }
    let mut grad = Tensor::zeros(shape);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let s_row = &student_logits.data()[i * d..(i + 1) * d];
        let t_row = &teacher_logits.data()[i * d..(i + 1) * d];

        // Teacher: center then sharpen.
        let zt: Vec<f64> = t_row
            .iter()
            .zip(center)
            .map(|(&t, &c)| (t - c) / teacher_temp)
            .collect();
        let t_max = zt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let t_sum: f64 = zt.iter().map(|&z| (z - t_max).exp()).sum();
        let pt: Vec<f64> = zt.iter().map(|&z| (z - t_max).exp() / t_sum).collect();

        // Student: stable log-softmax.
        let zs: Vec<f64> = s_row.iter().map(|&s| s / student_temp).collect();
        let s_max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zs.iter().map(|&z| (z - s_max).exp()).sum::<f64>().ln() + s_max;
        let log_ps: Vec<f64> = zs.iter().map(|&z| z - lse).collect();

        total -= pt.iter().zip(&log_ps).map(|(&p, &lp)| p * lp).sum::<f64>();
        let g_row = &mut grad.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            let ps = log_ps[j].exp();
            g_row[j] = (ps - pt[j]) / student_temp * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

/// Mutable per-run state of the baseline trainer.
pub struct DinoState {
    pub epoch: usize,
    pub global_step: u64,
    pub optimizer: Optimizer,
    pub loss_history: Vec<f64>,
    pub counters: CostCounters,
}

impl DinoState {
    pub fn new(student: &Arm) -> DinoState {
        DinoState {
            epoch: 0,
            global_step: 0,
            optimizer: Optimizer::Adam(Adam::new(student.store())),
            loss_history: Vec::new(),
            counters: CostCounters::default(),
        }
    }
}

/// One distillation step on pre-augmented view batches (at least two).
///
/// The loss averages the cross-entropy over all ordered (teacher view,
/// student view) pairs with distinct views. The student takes a gradient
/// step; the teacher moves by EMA; the center moves toward the batch mean
/// of the teacher logits over all views.
pub fn dino_step(
    views: &[Tensor],
    student: &mut Arm,
    teacher: &mut TeacherState,
    state: &mut DinoState,
    cfg: &DinoConfig,
) -> Result<f64> {
    if views.len() < 2 {
        return Err(CassError::Contract(format!(
            "self-distillation needs at least 2 views, got {}",
            views.len()
        )));
    }
    let lr = cosine_lr(state.global_step, cfg.lr_max, cfg.lr_min, cfg.cosine_t);

    // Teacher forwards: values only, caches dropped; no gradient path.
    let step_ctx = format!("(step {})", state.global_step);
    let mut teacher_logits = Vec::with_capacity(views.len());
    for view in views {
        let (out, _) = teacher
            .arm
            .forward(view, TapFlags::none())
            .map_err(|e| divergence_abort(e, &step_ctx))?;
        teacher_logits.push(out.logits.values);
    }
    let mut student_out = Vec::with_capacity(views.len());
    for view in views {
        student_out.push(
            student
                .forward(view, TapFlags::none())
                .map_err(|e| divergence_abort(e, &step_ctx))?,
        );
    }
    state.counters.forward_passes += 2 * views.len() as u64;

    let pair_count = (views.len() * (views.len() - 1)) as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = student_out
        .iter()
        .map(|(out, _)| Tensor::zeros(out.logits.values.shape()))
        .collect();
    for (ti, t_logits) in teacher_logits.iter().enumerate() {
        for (sj, (s_out, _)) in student_out.iter().enumerate() {
            if ti == sj {
                continue;
            }
            let (loss, grad) = dino_loss(
                &s_out.logits.values,
                t_logits,
                &teacher.center,
                cfg.student_temp,
                cfg.teacher_temp,
            )?;
            total += loss / pair_count;
            crate::tensor::axpy(1.0 / pair_count, grad.data(), grads[sj].data_mut());
        }
    }
    if !total.is_finite() {
        return Err(CassError::Aborted(format!(
            "distillation loss became non-finite ({total}) at step {}",
            state.global_step
        )));
    }

    student.store_mut().zero_grads();
    for ((_, cache), grad) in student_out.iter().zip(&grads) {
        student.backward(cache, grad);
    }
    state.optimizer.step(student.store_mut(), lr)?;

    // Center EMA over the batch mean of all teacher view logits.
    let d = teacher.center.len();
    let mut mean = vec![0.0; d];
    let mut rows = 0usize;
    for logits in &teacher_logits {
        let b = logits.shape()[0];
        for i in 0..b {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += logits.data()[i * d + j];
            }
        }
        rows += b;
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let cm = cfg.center_momentum;
    for (c, m) in teacher.center.iter_mut().zip(&mean) {
        *c = cm * *c + (1.0 - cm) * m;
    }

    ema_update(
        teacher.arm.store_mut(),
        student.store(),
        cfg.momentum,
        &mut state.counters,
    )?;

    state.global_step += 1;
    state.loss_history.push(total);
    Ok(total)
}

pub struct DinoOutcome {
    pub student_checkpoint: PathBuf,
    pub teacher_checkpoint: PathBuf,
    pub record: RunRecord,
}

fn training_indices(dataset: &LabeledImageDataset) -> Vec<usize> {
    match &dataset.split_assignment {
        Some(_) => dataset.indices(Split::Train),
        None => (0..dataset.len()).collect(),
    }
}

/// Full baseline pretraining loop; mirrors the siamese trainer's epoch and
/// batch order so cost comparisons run on an identical budget.
pub fn dino_pretrain(
    dataset: &LabeledImageDataset,
    student: &mut Arm,
    augmenter: &Augmenter,
    cfg: &DinoConfig,
    out_dir: &Path,
) -> Result<DinoOutcome> {
    cfg.validate()?;
    let indices = training_indices(dataset);
    if indices.is_empty() {
        return Err(CassError::Config("no training samples to pretrain on".into()));
    }
    let (th, tw) = augmenter.cfg.target_size;
    if (th, tw) != student.spec.input_hw {
        return Err(CassError::Contract(format!(
            "augmenter emits {:?}, student expects {:?}",
            (th, tw),
            student.spec.input_hw
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let snapshot = serde_json::json!({
        "method": "dino",
        "dino": cfg,
        "student": student.spec,
        "augment": augmenter.cfg,
    });
    let run_id = deterministic_run_id("dino", cfg.seed, &snapshot);
    let aug_start = augmenter.counter.count();
    let started = Instant::now();

    let mut state = DinoState::new(student);
    let mut teacher = TeacherState::from_student(student, &mut state.counters)?;
    let mut epoch_curve = Vec::with_capacity(cfg.epochs);

    let loop_result = (|| -> Result<()> {
        for epoch in 1..=cfg.epochs {
            state.epoch = epoch;
            let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            order_rng.set_stream(2 * epoch as u64);
            let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            aug_rng.set_stream(2 * epoch as u64 + 1);

            let mut order = indices.clone();
            order.shuffle(&mut order_rng);

            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let mut views = Vec::with_capacity(cfg.views_per_image);
                for _ in 0..cfg.views_per_image {
                    let imgs: Vec<Tensor> = chunk
                        .iter()
                        .map(|&i| augmenter.apply(&dataset.samples[i].image, &mut aug_rng))
                        .collect::<Result<_>>()?;
                    views.push(stack_images(&imgs)?);
                }
                epoch_loss += dino_step(&views, student, &mut teacher, &mut state, cfg)?;
                batches += 1;
            }
            epoch_curve.push(epoch_loss / batches as f64);
        }
        Ok(())
    })();

    state.counters.augmentation_applications = augmenter.counter.count() - aug_start;
    let wall = started.elapsed().as_secs_f64();
    let mut record = RunRecord {
        run_id,
        method: "dino".into(),
        seed: cfg.seed,
        config_snapshot: snapshot,
        loss_curve: epoch_curve,
        counters: state.counters,
        wall_clock_seconds: [("pretrain".to_string(), wall)].into_iter().collect(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        status: RunStatus::Completed,
    };

    if let Err(err) = loop_result {
        record.status = RunStatus::Aborted {
            reason: err.to_string(),
        };
        record.save(&out_dir.join("pretrain_record.json"))?;
        return Err(err);
    }

    let student_path = out_dir.join("student.ckpt");
    let teacher_path = out_dir.join("teacher.ckpt");
    save_checkpoint(student, cfg.epochs as u64, false, &student_path)?;
    save_checkpoint(&teacher.arm, cfg.epochs as u64, false, &teacher_path)?;
    record.checkpoints = vec![
        student_path.display().to_string(),
        teacher_path.display().to_string(),
    ];
    record.save(&out_dir.join("pretrain_record.json"))?;

    Ok(DinoOutcome {
        student_checkpoint: student_path,
        teacher_checkpoint: teacher_path,
        record,
    })
}
