//! Siamese pretraining: one augmented view, two arms, cosine pairing loss.
//!
//! Each step augments a batch once, runs the identical batch through both
//! arms, and backpropagates the normalized cosine loss into each arm via
//! its own optimizer. No parameters move between the arms at any point, so
//! the parameter-copy counter stays at zero by construction. Stochastic
//! weight averaging snapshots the last quarter of training and the averaged
//! weights are what the saved (default) checkpoints carry.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arms::save_checkpoint;
use crate::arms::{divergence_abort, ArmPair, TapFlags};
use crate::augment::Augmenter;
use crate::data::{stack_images, LabeledImageDataset, Split};
use crate::error::{CassError, Result};
use crate::loss::{apply_head, apply_head_backward, cass_loss_grad, HeadVariant, DEFAULT_EPS};
use crate::optim::{cosine_lr, swa_start_epoch, Optimizer, OptimizerKind, SwaAverager};
use crate::record::{deterministic_run_id, CostCounters, RunRecord, RunStatus};
use crate::tensor::Tensor;

/// Loss level treated as an anti-aligned plateau.
pub const DIVERGENCE_THRESHOLD: f64 = 3.99;
/// Consecutive plateau steps tolerated before aborting.
pub const DIVERGENCE_PATIENCE: u32 = 10;
/// Slack over the theoretical loss ceiling of 4.
pub const LOSS_BOUND_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaSettings {
    pub enabled: bool,
    /// First epoch (1-based) whose end-of-epoch weights enter the average;
    /// `None` resolves to the last quarter of training.
    pub start_epoch: Option<usize>,
    pub update_every: usize,
}

impl Default for SwaSettings {
    fn default() -> Self {
        SwaSettings {
            enabled: true,
            start_epoch: None,
            update_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cosine_t: u64,
    pub optimizer_cnn: OptimizerKind,
    /// The transformer arm trains with Adam only.
    pub optimizer_other: OptimizerKind,
    pub swa: SwaSettings,
    pub head_variant: HeadVariant,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-6,
            cosine_t: 16,
            optimizer_cnn: OptimizerKind::Adam,
            optimizer_other: OptimizerKind::Adam,
            swa: SwaSettings::default(),
            head_variant: HeadVariant::None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
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
        if self.optimizer_other != OptimizerKind::Adam {
            return Err(CassError::Config(
                "the transformer arm supports only the adam optimizer".into(),
            ));
        }
        if self.swa.update_every == 0 {
            return Err(CassError::Config("swa.update_every must be positive".into()));
        }
        if let Some(start) = self.swa.start_epoch {
            if start == 0 || start > self.epochs {
                return Err(CassError::Config(format!(
                    "swa.start_epoch must lie in 1..={}, got {start}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Resolved 1-based first SWA epoch.
    pub fn swa_start(&self) -> usize {
        self.swa.start_epoch.unwrap_or_else(|| swa_start_epoch(self.epochs))
    }
}

fn optimizer_for(pair_arm_family: crate::arms::Family, cfg: &PretrainConfig) -> OptimizerKind {
    match pair_arm_family {
        crate::arms::Family::Cnn => cfg.optimizer_cnn,
        crate::arms::Family::Vit => cfg.optimizer_other,
    }
}

/// Mutable per-run training state.
pub struct PretrainState {
    /// 1-based epoch currently executing (0 before the first).
    pub epoch: usize,
    pub global_step: u64,
    pub opt_a: Optimizer,
    pub opt_b: Optimizer,
    pub swa_a: SwaAverager,
    pub swa_b: SwaAverager,
    /// Per-step losses.
    pub loss_history: Vec<f64>,
    pub counters: CostCounters,
    plateau_run: u32,
}

impl PretrainState {
    pub fn new(pair: &ArmPair, cfg: &PretrainConfig) -> PretrainState {
        PretrainState {
            epoch: 0,
            global_step: 0,
            opt_a: Optimizer::build(optimizer_for(pair.arm_a.spec.family, cfg), pair.arm_a.store()),
            opt_b: Optimizer::build(optimizer_for(pair.arm_b.spec.family, cfg), pair.arm_b.store()),
            swa_a: SwaAverager::new(),
            swa_b: SwaAverager::new(),
            loss_history: Vec::new(),
            counters: CostCounters::default(),
            plateau_run: 0,
        }
    }

    /// Checks a step loss against the NaN and plateau abort conditions.
    fn observe_loss(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(CassError::Aborted(format!(
                "loss became non-finite ({loss}) at step {} (epoch {}); \
                 recent losses: {:?}",
                self.global_step,
                self.epoch,
                self.loss_history.iter().rev().take(5).collect::<Vec<_>>()
            )));
        }
        if !(-LOSS_BOUND_TOL..=4.0 + LOSS_BOUND_TOL).contains(&loss) {
            return Err(CassError::Contract(format!(
                "loss {loss} escaped the [0, 4] bound at step {}",
                self.global_step
            )));
        }
        if loss > DIVERGENCE_THRESHOLD {
            self.plateau_run += 1;
        } else {
            self.plateau_run = 0;
        }
        if self.plateau_run >= DIVERGENCE_PATIENCE {
            return Err(CassError::Aborted(format!(
                "loss stayed above {DIVERGENCE_THRESHOLD} for {DIVERGENCE_PATIENCE} \
                 consecutive steps (anti-aligned plateau), last value {loss} at step {}",
                self.global_step
            )));
        }
        Ok(())
    }
}

/// One optimization step on a batch that was already augmented exactly once.
///
/// Runs both arms on the identical batch, applies the head variant, and
/// steps each arm's own optimizer with the analytic loss gradient. Returns
/// the step loss.
pub fn pretrain_step(
    batch: &Tensor,
    pair: &mut ArmPair,
    state: &mut PretrainState,
    cfg: &PretrainConfig,
) -> Result<f64> {
    let lr = cosine_lr(state.global_step, cfg.lr_max, cfg.lr_min, cfg.cosine_t);

    let step_ctx = format!("(step {})", state.global_step);
    let (out_a, cache_a) = pair
        .arm_a
        .forward(batch, TapFlags::none())
        .map_err(|e| divergence_abort(e, &step_ctx))?;
    let (out_b, cache_b) = pair
        .arm_b
        .forward(batch, TapFlags::none())
        .map_err(|e| divergence_abort(e, &step_ctx))?;
    state.counters.forward_passes += 2;

    let head_a = apply_head(&out_a.logits, cfg.head_variant);
    let head_b = apply_head(&out_b.logits, cfg.head_variant);
    let (loss, grad_a, grad_b) = cass_loss_grad(&head_a, &head_b, DEFAULT_EPS)?;
    state.observe_loss(loss)?;

    let grad_logits_a = apply_head_backward(&head_a, &grad_a, cfg.head_variant);
    let grad_logits_b = apply_head_backward(&head_b, &grad_b, cfg.head_variant);

    pair.arm_a.store_mut().zero_grads();
    pair.arm_b.store_mut().zero_grads();
    pair.arm_a.backward(&cache_a, &grad_logits_a);
    pair.arm_b.backward(&cache_b, &grad_logits_b);
    state.opt_a.step(pair.arm_a.store_mut(), lr)?;
    state.opt_b.step(pair.arm_b.store_mut(), lr)?;

    state.global_step += 1;
    state.loss_history.push(loss);
    Ok(loss)
}

/// Everything a finished (or aborted) pretraining run leaves behind.
pub struct PretrainOutcome {
    /// Checkpoint of `pair.arm_a` (SWA weights when enabled).
    pub checkpoint_a: PathBuf,
    /// Checkpoint of `pair.arm_b`.
    pub checkpoint_b: PathBuf,
    pub record: RunRecord,
}

/// Indices this run trains on: the train split when one is assigned, else
/// the whole dataset. Pretraining never reads val or test images.
fn training_indices(dataset: &LabeledImageDataset) -> Vec<usize> {
    match &dataset.split_assignment {
        Some(_) => dataset.indices(Split::Train),
        None => (0..dataset.len()).collect(),
    }
}

fn config_snapshot(pair: &ArmPair, augmenter: &Augmenter, cfg: &PretrainConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "method": "cass",
        "pretrain": cfg,
        "arm_a": pair.arm_a.spec,
        "arm_b": pair.arm_b.spec,
        "augment": augmenter.cfg,
    }))
}

/// Runs the full pretraining loop and writes checkpoints plus a run record
/// under `out_dir`.
///
/// Executes exactly `epochs * ceil(N / batch_size)` steps over the training
/// indices in a deterministic seeded order. On abort the partial record is
/// still written (status `aborted`) before the error propagates.
pub fn pretrain(
    dataset: &LabeledImageDataset,
    pair: &mut ArmPair,
    augmenter: &Augmenter,
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let indices = training_indices(dataset);
    if indices.is_empty() {
        return Err(CassError::Config("no training samples to pretrain on".into()));
    }
    let (th, tw) = augmenter.cfg.target_size;
    if (th, tw) != pair.arm_a.spec.input_hw {
        return Err(CassError::Contract(format!(
            "augmenter emits {:?}, arms expect {:?}",
            (th, tw),
            pair.arm_a.spec.input_hw
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let snapshot = config_snapshot(pair, augmenter, cfg)?;
    let run_id = deterministic_run_id("cass", cfg.seed, &snapshot);
    let aug_start = augmenter.counter.count();
    let started = Instant::now();

    let mut state = PretrainState::new(pair, cfg);
    let mut epoch_curve: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let swa_start = cfg.swa_start();

    let loop_result = (|| -> Result<()> {
        for epoch in 1..=cfg.epochs {
            state.epoch = epoch;
            // Distinct deterministic streams: even for batch order, odd for
            // augmentation draws, both keyed by epoch.
            let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            order_rng.set_stream(2 * epoch as u64);
            let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            aug_rng.set_stream(2 * epoch as u64 + 1);

            let mut order = indices.clone();
            order.shuffle(&mut order_rng);

            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let views: Vec<Tensor> = chunk
                    .iter()
                    .map(|&i| augmenter.apply(&dataset.samples[i].image, &mut aug_rng))
                    .collect::<Result<_>>()?;
                let batch = stack_images(&views)?;
                epoch_loss += pretrain_step(&batch, pair, &mut state, cfg)?;
                batches += 1;
            }
            epoch_curve.push(epoch_loss / batches as f64);

            if cfg.swa.enabled && epoch >= swa_start && (epoch - swa_start).is_multiple_of(cfg.swa.update_every)
            {
                state.swa_a.update(pair.arm_a.store())?;
                state.swa_b.update(pair.arm_b.store())?;
            }
        }
        Ok(())
    })();

    state.counters.augmentation_applications = augmenter.counter.count() - aug_start;
    let wall = started.elapsed().as_secs_f64();
    let mut record = RunRecord {
        run_id,
        method: "cass".into(),
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

    // Raw weights first; with SWA enabled the averaged weights overwrite the
    // live arms and become the primary checkpoints used downstream.
    let epoch = cfg.epochs as u64;
    let primary_a = out_dir.join("arm_a.ckpt");
    let primary_b = out_dir.join("arm_b.ckpt");
    if cfg.swa.enabled {
        let raw_a = out_dir.join("arm_a_raw.ckpt");
        let raw_b = out_dir.join("arm_b_raw.ckpt");
        save_checkpoint(&pair.arm_a, epoch, false, &raw_a)?;
        save_checkpoint(&pair.arm_b, epoch, false, &raw_b)?;
        state.swa_a.write_to(pair.arm_a.store_mut())?;
        state.swa_b.write_to(pair.arm_b.store_mut())?;
        save_checkpoint(&pair.arm_a, epoch, true, &primary_a)?;
        save_checkpoint(&pair.arm_b, epoch, true, &primary_b)?;
        record.checkpoints = vec![
            primary_a.display().to_string(),
            primary_b.display().to_string(),
            raw_a.display().to_string(),
            raw_b.display().to_string(),
        ];
    } else {
        save_checkpoint(&pair.arm_a, epoch, false, &primary_a)?;
        save_checkpoint(&pair.arm_b, epoch, false, &primary_b)?;
        record.checkpoints = vec![
            primary_a.display().to_string(),
            primary_b.display().to_string(),
        ];
    }
    record.save(&out_dir.join("pretrain_record.json"))?;

    Ok(PretrainOutcome {
        checkpoint_a: primary_a,
        checkpoint_b: primary_b,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arms::{pair_arms, ArmSpec, Family};
    use crate::augment::AugmentConfig;
    use crate::data::{synth_dataset, SynthConfig};

    const SIDE: usize = 8;

    fn desk_pair(seed: u64) -> ArmPair {
        let cnn = ArmSpec::new(Family::Cnn, "micro_cnn", 16).with_input_hw(SIDE, SIDE);
        let vit = ArmSpec::new(Family::Vit, "vit_tiny_p4", 16).with_input_hw(SIDE, SIDE);
        pair_arms(&cnn, &vit, seed).unwrap()
    }

    fn desk_augmenter() -> Augmenter {
        Augmenter::new(AugmentConfig::desk(SIDE)).unwrap()
    }

    fn desk_dataset(n: usize) -> LabeledImageDataset {
        synth_dataset(
            &SynthConfig {
                n,
                classes: 4,
                image_size: SIDE,
                ..SynthConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn desk_config(epochs: usize, batch: usize, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: batch,
            seed,
            ..PretrainConfig::default()
        }
    }

    fn store_values(pair: &ArmPair) -> Vec<f64> {
        let mut v = Vec::new();
        for arm in [&pair.arm_a, &pair.arm_b] {
            for p in arm.store().iter() {
                v.extend_from_slice(p.value.data());
            }
        }
        v
    }

    fn fixed_batch(b: usize) -> Tensor {
        let ds = desk_dataset(b.max(10));
        let views: Vec<Tensor> = ds.samples[..b].iter().map(|s| s.image.clone()).collect();
        stack_images(&views).unwrap()
    }

    #[test]
    fn step_counts_and_counters_match_the_closed_forms() {
        let ds = desk_dataset(16);
        let mut pair = desk_pair(1);
        let aug = desk_augmenter();
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(1, 16, 1);
        let out = pretrain(&ds, &mut pair, &aug, &cfg, dir.path()).unwrap();
        assert_eq!(out.record.loss_curve.len(), 1);
        assert_eq!(out.record.counters.forward_passes, 2);
        assert_eq!(out.record.counters.augmentation_applications, 16);
        assert_eq!(out.record.counters.parameter_copy_ops, 0);
        assert_eq!(out.record.status, RunStatus::Completed);
    }

    #[test]
    fn partial_batches_round_up_the_step_count() {
        let ds = desk_dataset(10);
        let mut pair = desk_pair(1);
        let aug = desk_augmenter();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(2, 4, 1);
        cfg.swa.start_epoch = Some(2);
        let out = pretrain(&ds, &mut pair, &aug, &cfg, dir.path()).unwrap();
        // ceil(10/4) = 3 steps per epoch, 2 epochs.
        assert_eq!(out.record.counters.forward_passes, 2 * 3 * 2);
        assert_eq!(out.record.counters.augmentation_applications, 20);
        assert_eq!(out.record.loss_curve.len(), 2);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut pair = desk_pair(3);
        let before = store_values(&pair);
        let mut cfg = desk_config(1, 4, 3);
        cfg.lr_max = 0.0;
        cfg.lr_min = 0.0;
        let mut state = PretrainState::new(&pair, &cfg);
        let batch = fixed_batch(4);
        pretrain_step(&batch, &mut pair, &mut state, &cfg).unwrap();
        assert_eq!(store_values(&pair), before);
    }

    #[test]
    fn one_step_is_deterministic() {
        let batch = fixed_batch(4);
        let cfg = desk_config(1, 4, 5);
        let mut results = Vec::new();
        for _ in 0..2 {
            let mut pair = desk_pair(5);
            let mut state = PretrainState::new(&pair, &cfg);
            let loss = pretrain_step(&batch, &mut pair, &mut state, &cfg).unwrap();
            results.push((loss, store_values(&pair)));
        }
        assert_eq!(results[0].0, results[1].0);
        assert_eq!(results[0].1, results[1].1);
    }

    #[test]
    fn both_arms_move_under_nonzero_gradients() {
        let mut pair = desk_pair(7);
        let before_a: Vec<f64> = pair.arm_a.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let before_b: Vec<f64> = pair.arm_b.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let cfg = desk_config(1, 4, 7);
        let mut state = PretrainState::new(&pair, &cfg);
        pretrain_step(&fixed_batch(4), &mut pair, &mut state, &cfg).unwrap();
        let after_a: Vec<f64> = pair.arm_a.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let after_b: Vec<f64> = pair.arm_b.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        assert_ne!(before_a, after_a);
        assert_ne!(before_b, after_b);
    }

    #[test]
    fn arm_updates_are_independent() {
        let batch = fixed_batch(4);
        let cfg = desk_config(1, 4, 9);

        // Control: a full step moves both arms.
        let mut control = desk_pair(9);
        let mut state = PretrainState::new(&control, &cfg);
        pretrain_step(&batch, &mut control, &mut state, &cfg).unwrap();

        // Treatment: identical step except arm_a's gradients are wiped
        // before the optimizers run. arm_b must update exactly as before.
        let mut pair = desk_pair(9);
        let initial_a: Vec<f64> = pair.arm_a.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let mut st = PretrainState::new(&pair, &cfg);
        let lr = cosine_lr(0, cfg.lr_max, cfg.lr_min, cfg.cosine_t);
        let (out_a, cache_a) = pair.arm_a.forward(&batch, TapFlags::none()).unwrap();
        let (out_b, cache_b) = pair.arm_b.forward(&batch, TapFlags::none()).unwrap();
        let head_a = apply_head(&out_a.logits, cfg.head_variant);
        let head_b = apply_head(&out_b.logits, cfg.head_variant);
        let (_, grad_a, grad_b) = cass_loss_grad(&head_a, &head_b, DEFAULT_EPS).unwrap();
        let ga = apply_head_backward(&head_a, &grad_a, cfg.head_variant);
        let gb = apply_head_backward(&head_b, &grad_b, cfg.head_variant);
        pair.arm_a.store_mut().zero_grads();
        pair.arm_b.store_mut().zero_grads();
        pair.arm_a.backward(&cache_a, &ga);
        pair.arm_b.backward(&cache_b, &gb);
        pair.arm_a.store_mut().zero_grads(); // wipe arm_a's gradients
        st.opt_a.step(pair.arm_a.store_mut(), lr).unwrap();
        st.opt_b.step(pair.arm_b.store_mut(), lr).unwrap();

        let treated_a: Vec<f64> = pair.arm_a.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let treated_b: Vec<f64> = pair.arm_b.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let control_b: Vec<f64> = control.arm_b.store().iter().flat_map(|p| p.value.data().to_vec()).collect();
        assert_eq!(treated_b, control_b);
        assert_eq!(treated_a, initial_a);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let mut pair = desk_pair(2);
        // Blow up both heads so both row norms overflow to infinity and the
        // cosine becomes inf/inf = NaN while the logits themselves stay
        // finite (one-sided overflow would still give a finite loss).
        for arm in [&mut pair.arm_a, &mut pair.arm_b] {
            let head = arm.store().find("head.weight").unwrap();
            for v in arm.store_mut().value_mut(head).data_mut() {
                *v = 1e200;
            }
        }
        let cfg = desk_config(1, 4, 2);
        let mut state = PretrainState::new(&pair, &cfg);
        let err = pretrain_step(&fixed_batch(4), &mut pair, &mut state, &cfg).unwrap_err();
        assert!(matches!(err, CassError::Aborted(_)), "got {err}");
    }

    #[test]
    fn plateau_aborts_after_ten_consecutive_high_losses() {
        let pair = desk_pair(2);
        let cfg = desk_config(1, 4, 2);
        let mut state = PretrainState::new(&pair, &cfg);
        for _ in 0..DIVERGENCE_PATIENCE - 1 {
            state.observe_loss(3.995).unwrap();
        }
        // A healthy step resets the streak.
        state.observe_loss(1.0).unwrap();
        for _ in 0..DIVERGENCE_PATIENCE - 1 {
            state.observe_loss(3.995).unwrap();
        }
        let err = state.observe_loss(3.995).unwrap_err();
        assert!(matches!(err, CassError::Aborted(_)));
    }

    #[test]
    fn smoke_training_reduces_loss() {
        // Median over 5 seeds: loss after ~50 steps < loss at step 1.
        let ds = desk_dataset(64);
        let aug = desk_augmenter();
        let mut improved = 0;
        for seed in 0..5u64 {
            let mut pair = desk_pair(seed);
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = desk_config(13, 16, seed); // 13 * ceil(64/16) = 52 steps
            cfg.swa.enabled = false;
            let out = pretrain(&ds, &mut pair, &aug, &cfg, dir.path()).unwrap();
            if *out.record.loss_curve.last().unwrap() < out.record.loss_curve[0] {
                improved += 1;
            }
        }
        assert!(improved >= 3, "loss improved for only {improved}/5 seeds");
    }

    #[test]
    fn swa_checkpoint_equals_offline_snapshot_mean() {
        let ds = desk_dataset(16);
        let aug = desk_augmenter();

        // Reference runs reproduce the raw weights after 1 and 2 epochs.
        let mut snapshots: Vec<Vec<f64>> = Vec::new();
        for epochs in [1usize, 2] {
            let mut pair = desk_pair(21);
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = desk_config(epochs, 16, 21);
            cfg.swa.enabled = false;
            pretrain(&ds, &mut pair, &aug, &cfg, dir.path()).unwrap();
            snapshots.push(store_values(&pair));
        }

        let mut pair = desk_pair(21);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(2, 16, 21);
        cfg.swa.start_epoch = Some(1);
        pretrain(&ds, &mut pair, &aug, &cfg, dir.path()).unwrap();
        // After pretrain the live arms hold the SWA weights.
        let averaged = store_values(&pair);
        for (i, avg) in averaged.iter().enumerate() {
            let mean = (snapshots[0][i] + snapshots[1][i]) / 2.0;
            assert!(
                (avg - mean).abs() < 1e-10,
                "swa[{i}] = {avg}, offline mean = {mean}"
            );
        }
    }

    #[test]
    fn checkpoints_round_trip_and_record_persists() {
        let ds = desk_dataset(12);
        let mut pair = desk_pair(4);
        let aug = desk_augmenter();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(2, 8, 4);
        cfg.swa.start_epoch = Some(2);
        let out = pretrain(&ds, &mut pair, &aug, &cfg, dir.path()).unwrap();

        let (arm_a, meta_a) = crate::arms::load_checkpoint(&out.checkpoint_a).unwrap();
        let (arm_b, meta_b) = crate::arms::load_checkpoint(&out.checkpoint_b).unwrap();
        assert!(meta_a.swa && meta_b.swa);
        assert_eq!(arm_a.spec.variant, "micro_cnn");
        assert_eq!(arm_b.spec.variant, "vit_tiny_p4");

        let rec = RunRecord::load(&dir.path().join("pretrain_record.json")).unwrap();
        assert_eq!(rec.run_id, out.record.run_id);
        assert_eq!(rec.checkpoints.len(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = desk_config(1, 4, 0);
        cfg.lr_min = 1.0;
        cfg.lr_max = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = desk_config(1, 4, 0);
        cfg.optimizer_other = OptimizerKind::Sgd;
        assert!(cfg.validate().is_err());

        let mut cfg = desk_config(2, 4, 0);
        cfg.swa.start_epoch = Some(3);
        assert!(cfg.validate().is_err());

        let cfg = desk_config(1, 4, 0);
        assert_eq!(cfg.swa_start(), 1);
        let cfg = desk_config(100, 4, 0);
        assert_eq!(cfg.swa_start(), 75);
    }
}
