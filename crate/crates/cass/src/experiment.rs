//! Config-driven experiment orchestration.
//!
//! One [`ExperimentConfig`] describes a full study: the pretraining method
//! (siamese pair or distillation baseline), the arm specs, sub-configs for
//! every phase, the dataset, and the seed list. [`run`] executes
//! pretrain -> fine-tune -> evaluate per seed and writes an aggregate with
//! confidence intervals last; [`sweep`] repeats that over one config axis;
//! [`compare_cost`] pits the two methods against each other on a matched
//! budget; [`report_*`] render tables and plots from persisted results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, SweepCell};
use crate::arms::{build_arm, pair_arms, ArmSpec, Family};
use crate::augment::{AugmentConfig, Augmenter, ExtraAug};
use crate::data::{load_image_folder, load_multilabel_folder, split, synth_dataset, LabeledImageDataset, SynthConfig};
use crate::dino::{dino_pretrain, DinoConfig};
use crate::error::{CassError, Result};
use crate::finetune::{finetune, FinetuneConfig, FinetuneOutcome};
use crate::loss::HeadVariant;
use crate::metrics::ci95;
use crate::optim::OptimizerKind;
use crate::plot::{line_plot, Series};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::record::{CostCounters, RunRecord};

/// Environment variable naming the default results root.
pub const RESULTS_ROOT_ENV: &str = "CASS_RESULTS_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cass,
    Dino,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Cass => "cass",
            Method::Dino => "dino",
        }
    }
}

/// Where the labeled images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetDescriptor {
    /// Procedurally generated classes; self-contained and reproducible.
    Synthetic {
        synth: SynthConfig,
        /// Seed for sample generation and the train/val/test split. Kept
        /// apart from run seeds so every seed trains on identical data.
        data_seed: u64,
    },
    /// Class-per-subdirectory image tree.
    ImageFolder { path: PathBuf, data_seed: u64 },
    /// Image directory plus a multi-hot label table.
    MultilabelFolder {
        path: PathBuf,
        label_file: PathBuf,
        data_seed: u64,
    },
}

impl DatasetDescriptor {
    pub fn build(&self) -> Result<LabeledImageDataset> {
        let (mut ds, seed) = match self {
            DatasetDescriptor::Synthetic { synth, data_seed } => {
                (synth_dataset(synth, *data_seed)?, *data_seed)
            }
            DatasetDescriptor::ImageFolder { path, data_seed } => {
                (load_image_folder(path)?, *data_seed)
            }
            DatasetDescriptor::MultilabelFolder {
                path,
                label_file,
                data_seed,
            } => (load_multilabel_folder(path, label_file)?, *data_seed),
        };
        split(&mut ds, seed)?;
        Ok(ds)
    }
}

/// Config axes a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    Epochs,
    AugmentSet,
    OptimizerCnn,
    HeadVariant,
    ArchPair,
    LabelFraction,
}

/// One sweep setting; numbers for size-like axes, names for categorical
/// ones, a `[cnn, vit]` pair for the architecture axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Text(String),
    Pair(Vec<String>),
}

impl SweepValue {
    /// Directory- and label-safe rendering.
    pub fn label(&self) -> String {
        match self {
            SweepValue::Number(v) => {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    format!("{}", *v as i64)
                } else {
                    format!("{v}")
                }
            }
            SweepValue::Text(s) => s.clone(),
            SweepValue::Pair(p) => p.join("+"),
        }
    }

    fn as_number(&self, axis: SweepAxis) -> Result<f64> {
        match self {
            SweepValue::Number(v) => Ok(*v),
            _ => Err(CassError::Config(format!(
                "sweep axis {axis:?} needs numeric values, got {self:?}"
            ))),
        }
    }

    fn as_text(&self, axis: SweepAxis) -> Result<&str> {
        match self {
            SweepValue::Text(s) => Ok(s),
            _ => Err(CassError::Config(format!(
                "sweep axis {axis:?} needs string values, got {self:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_label_fractions() -> Vec<f64> {
    vec![1.0]
}

fn default_arm_a() -> ArmSpec {
    ArmSpec::new(Family::Cnn, "micro_cnn", 16).with_input_hw(16, 16)
}

fn default_arm_b() -> Option<ArmSpec> {
    Some(ArmSpec::new(Family::Vit, "vit_tiny_p4", 16).with_input_hw(16, 16))
}

fn default_dataset() -> DatasetDescriptor {
    DatasetDescriptor::Synthetic {
        synth: SynthConfig {
            image_size: 16,
            ..SynthConfig::default()
        },
        data_seed: 0,
    }
}

/// Full description of one experiment; every field has a default and maps
/// one-to-one onto the TOML config schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Experiment name; becomes the results subdirectory.
    pub name: String,
    pub method: Method,
    /// First arm: the CNN in a siamese pair, or the distillation student.
    pub arm_a: ArmSpec,
    /// Second arm of a siamese pair; unused by the distillation baseline.
    pub arm_b: Option<ArmSpec>,
    pub pretrain: PretrainConfig,
    pub dino: DinoConfig,
    pub finetune: FinetuneConfig,
    pub augment: AugmentConfig,
    pub dataset: DatasetDescriptor,
    /// Label availability levels to fine-tune at, each in (0, 1].
    pub label_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepSpec>,
    /// Output directory; defaults to `$CASS_RESULTS_ROOT/<name>` or
    /// `results/<name>`.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            method: Method::Cass,
            arm_a: default_arm_a(),
            arm_b: default_arm_b(),
            pretrain: PretrainConfig::default(),
            dino: DinoConfig::default(),
            finetune: FinetuneConfig::default(),
            augment: AugmentConfig::desk(16),
            dataset: default_dataset(),
            label_fractions: default_label_fractions(),
            seeds: default_seeds(),
            sweep: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CassError::Config(format!(
                "experiment name '{}' must be a plain directory name",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(CassError::Config("need at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CassError::Config("seeds must be distinct".into()));
        }
        if self.label_fractions.is_empty()
            || self.label_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(CassError::Config(
                "label_fractions must be nonempty values in (0, 1]".into(),
            ));
        }
        match self.method {
            Method::Cass => {
                let b = self.arm_b.as_ref().ok_or_else(|| {
                    CassError::Config("siamese method needs arm_b".into())
                })?;
                // Build once to surface registry/shape mismatches early.
                pair_arms(&self.arm_a, b, self.seeds[0])?;
                self.pretrain.validate()?;
            }
            Method::Dino => {
                build_arm(&self.arm_a, self.seeds[0])?;
                self.dino.validate()?;
            }
        }
        self.finetune.validate()?;
        self.augment.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.len() < 2 {
                return Err(CassError::Config(
                    "a sweep needs at least two values".into(),
                ));
            }
            for v in &sweep.values {
                apply_sweep_value(self, sweep.axis, v)?;
            }
        }
        Ok(())
    }

    pub fn resolve_out_dir(&self) -> PathBuf {
        match &self.out_dir {
            Some(dir) => dir.clone(),
            None => std::env::var_os(RESULTS_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("results"))
                .join(&self.name),
        }
    }
}

/// Returns a copy of `base` with one axis set to `value`; the sweep and
/// output directory are cleared so cells run independently.
pub fn apply_sweep_value(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: &SweepValue,
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.sweep = None;
    cfg.out_dir = None;
    match axis {
        SweepAxis::BatchSize => {
            let b = value.as_number(axis)?;
            if b < 1.0 || b.fract() != 0.0 {
                return Err(CassError::Config(format!("bad batch size {b}")));
            }
            cfg.pretrain.batch_size = b as usize;
            cfg.dino.batch_size = b as usize;
        }
        SweepAxis::Epochs => {
            let e = value.as_number(axis)?;
            if e < 1.0 || e.fract() != 0.0 {
                return Err(CassError::Config(format!("bad epoch count {e}")));
            }
            cfg.pretrain.epochs = e as usize;
            cfg.pretrain.swa.start_epoch = None;
            cfg.dino.epochs = e as usize;
        }
        SweepAxis::AugmentSet => {
            cfg.augment.extra = match value.as_text(axis)? {
                "reduced" => [].into(),
                "solarize" => [ExtraAug::Solarize].into(),
                "blur" => [ExtraAug::GaussianBlur].into(),
                "byol_like" => [ExtraAug::Solarize, ExtraAug::GaussianBlur].into(),
                other => {
                    return Err(CassError::Config(format!(
                        "unknown augment set '{other}'; known: reduced, solarize, blur, byol_like"
                    )))
                }
            };
        }
        SweepAxis::OptimizerCnn => {
            cfg.pretrain.optimizer_cnn = match value.as_text(axis)? {
                "adam" => OptimizerKind::Adam,
                "sgd" => OptimizerKind::Sgd,
                other => {
                    return Err(CassError::Config(format!("unknown optimizer '{other}'")))
                }
            };
        }
        SweepAxis::HeadVariant => {
            cfg.pretrain.head_variant = match value.as_text(axis)? {
                "none" => HeadVariant::None,
                "softmax" => HeadVariant::Softmax,
                "sigmoid" => HeadVariant::Sigmoid,
                other => {
                    return Err(CassError::Config(format!("unknown head variant '{other}'")))
                }
            };
        }
        SweepAxis::ArchPair => {
            let pair = match value {
                SweepValue::Pair(p) if p.len() == 2 => p,
                _ => {
                    return Err(CassError::Config(
                        "arch_pair values must be [cnn_variant, vit_variant] pairs".into(),
                    ))
                }
            };
            let family_of = |variant: &str| {
                crate::arms::REGISTRY
                    .iter()
                    .find(|(n, _)| *n == variant)
                    .map(|(_, f)| *f)
                    .ok_or_else(|| CassError::Registry(format!("unknown variant '{variant}'")))
            };
            cfg.arm_a.family = family_of(&pair[0])?;
            cfg.arm_a.variant = pair[0].clone();
            if let Some(b) = cfg.arm_b.as_mut() {
                b.family = family_of(&pair[1])?;
                b.variant = pair[1].clone();
            }
        }
        SweepAxis::LabelFraction => {
            let f = value.as_number(axis)?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(CassError::Config(format!("bad label fraction {f}")));
            }
            cfg.label_fractions = vec![f];
        }
    }
    Ok(cfg)
}

/// Mean and 95% CI of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// Arm variant the score belongs to.
    pub arch: String,
    pub label_fraction: f64,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci95_halfwidth: f64,
    /// Raw per-seed values backing the row, in seed order.
    pub values: Vec<f64>,
}

/// Summed training cost over all completed seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub counters: CostCounters,
    /// Mean wall clock per phase, seconds.
    pub wall_clock_mean: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub experiment: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
    pub pretrain_cost: CostSummary,
}

impl AggregateReport {
    pub fn load(path: &Path) -> Result<AggregateReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Everything `run` leaves behind, in memory and on disk.
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    /// All per-seed records: one pretrain record per seed plus one
    /// fine-tune record per (arm, label fraction).
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateReport,
}

fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    match values.len() {
        0 => Err(CassError::Contract("no values to aggregate".into())),
        1 => Ok((values[0], 0.0)),
        _ => ci95(values),
    }
}

/// Pretrains one seed with the configured method and returns the produced
/// record plus the checkpoints to fine-tune, tagged by arm variant.
fn pretrain_one_seed(
    cfg: &ExperimentConfig,
    dataset: &LabeledImageDataset,
    seed: u64,
    seed_dir: &Path,
) -> Result<(RunRecord, Vec<(String, PathBuf)>)> {
    let augmenter = Augmenter::new(cfg.augment.clone())?;
    match cfg.method {
        Method::Cass => {
            let arm_b = cfg.arm_b.as_ref().expect("validated");
            let mut pair = pair_arms(&cfg.arm_a, arm_b, seed)?;
            let mut pre = cfg.pretrain.clone();
            pre.seed = seed;
            let out = pretrain(dataset, &mut pair, &augmenter, &pre, seed_dir)?;
            Ok((
                out.record,
                vec![
                    (cfg.arm_a.variant.clone(), out.checkpoint_a),
                    (arm_b.variant.clone(), out.checkpoint_b),
                ],
            ))
        }
        Method::Dino => {
            let mut student = build_arm(&cfg.arm_a, seed)?;
            let mut dcfg = cfg.dino.clone();
            dcfg.seed = seed;
            let out = dino_pretrain(dataset, &mut student, &augmenter, &dcfg, seed_dir)?;
            Ok((
                out.record,
                vec![(cfg.arm_a.variant.clone(), out.student_checkpoint)],
            ))
        }
    }
}

/// Executes the full experiment: per seed, pretrain with the configured
/// method, fine-tune every produced checkpoint at every label fraction,
/// and evaluate on the test split. Per-seed records are persisted as they
/// complete; the aggregate (mean and 95% CI per metric) is written last.
/// A diverged seed keeps its partial record and is listed in
/// `failed_seeds`; remaining seeds still run.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset.build()?;
    let dir = cfg.resolve_out_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let mut records = Vec::new();
    let mut failed_seeds = Vec::new();
    // (arch, fraction, metric) -> per-seed values.
    let mut cells: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut cost = CostSummary::default();
    let mut wall_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        let (pre_record, checkpoints) = match pretrain_one_seed(cfg, &dataset, seed, &seed_dir) {
            Ok(ok) => ok,
            Err(CassError::Aborted(reason)) => {
                // The trainer already wrote the partial record.
                failed_seeds.push(seed);
                if let Ok(partial) = RunRecord::load(&seed_dir.join("pretrain_record.json")) {
                    records.push(partial);
                } else {
                    return Err(CassError::Aborted(format!(
                        "seed {seed} aborted without a partial record: {reason}"
                    )));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        cost.counters.augmentation_applications +=
            pre_record.counters.augmentation_applications;
        cost.counters.forward_passes += pre_record.counters.forward_passes;
        cost.counters.parameter_copy_ops += pre_record.counters.parameter_copy_ops;
        for (phase, secs) in &pre_record.wall_clock_seconds {
            let slot = wall_sums.entry(phase.clone()).or_insert((0.0, 0));
            slot.0 += secs;
            slot.1 += 1;
        }
        records.push(pre_record);

        // Metrics join the aggregate only once every fine-tune of the seed
        // finished; a mid-seed abort keeps its partial records but
        // contributes nothing to the summary rows.
        let mut seed_cells: Vec<((String, String, String), f64)> = Vec::new();
        let mut seed_failed = false;
        'arms: for (arch, ckpt) in &checkpoints {
            for &fraction in &cfg.label_fractions {
                let mut ft = cfg.finetune.clone();
                ft.seed = seed;
                ft.label_fraction = fraction;
                let ft_dir = seed_dir.join(format!("finetune_{arch}_lf{fraction}"));
                let outcome: FinetuneOutcome = match finetune(ckpt, &dataset, &ft, &ft_dir) {
                    Ok(outcome) => outcome,
                    Err(CassError::Aborted(reason)) => {
                        failed_seeds.push(seed);
                        seed_failed = true;
                        if let Ok(partial) = RunRecord::load(&ft_dir.join("finetune_record.json"))
                        {
                            records.push(partial);
                        } else {
                            return Err(CassError::Aborted(format!(
                                "seed {seed} fine-tune aborted without a partial record: {reason}"
                            )));
                        }
                        break 'arms;
                    }
                    Err(e) => return Err(e),
                };
                for metric in &outcome.test_metrics {
                    seed_cells.push((
                        (
                            arch.clone(),
                            format!("{fraction}"),
                            metric.metric_name.clone(),
                        ),
                        metric.value,
                    ));
                }
                records.push(outcome.record);
            }
        }
        if seed_failed {
            continue;
        }
        for (key, value) in seed_cells {
            cells.entry(key).or_default().push(value);
        }
    }

    if records.is_empty() {
        return Err(CassError::Aborted("every seed failed".into()));
    }
    for (phase, (sum, n)) in wall_sums {
        cost.wall_clock_mean.insert(phase, sum / n as f64);
    }

    let mut rows = Vec::new();
    for ((arch, fraction, metric), values) in cells {
        let (mean, hw) = mean_ci(&values)?;
        rows.push(AggregateRow {
            arch,
            label_fraction: fraction.parse().expect("formatted from f64"),
            metric,
            n: values.len(),
            mean,
            ci95_halfwidth: hw,
            values,
        });
    }
    let aggregate = AggregateReport {
        experiment: cfg.name.clone(),
        method: cfg.method,
        seeds: cfg.seeds.clone(),
        failed_seeds,
        rows,
        pretrain_cost: cost,
    };
    let json = serde_json::to_string_pretty(&aggregate)?;
    std::fs::write(dir.join("aggregate.json"), json)?;

    Ok(ExperimentOutcome {
        dir,
        records,
        aggregate,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCellReport {
    pub value: SweepValue,
    pub label: String,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment: String,
    pub axis: SweepAxis,
    pub cells: Vec<SweepCellReport>,
}

impl SweepReport {
    pub fn load(path: &Path) -> Result<SweepReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Pretrains a single seed of `cfg` into `<out>/seed<seed>` and stops
/// before any fine-tuning; the produced checkpoints are tagged by arm
/// variant.
pub fn pretrain_seed(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(RunRecord, Vec<(String, PathBuf)>)> {
    cfg.validate()?;
    let dataset = cfg.dataset.build()?;
    let dir = cfg.resolve_out_dir();
    std::fs::create_dir_all(&dir)?;
    pretrain_one_seed(cfg, &dataset, seed, &dir.join(format!("seed{seed}")))
}

/// Fine-tunes one pretrained checkpoint on the experiment's dataset at the
/// given label fraction, writing into `out_dir`.
pub fn finetune_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    label_fraction: f64,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    let dataset = cfg.dataset.build()?;
    let mut ft = cfg.finetune.clone();
    ft.seed = seed;
    ft.label_fraction = label_fraction;
    finetune(checkpoint, &dataset, &ft, out_dir)
}

/// Runs the configured sweep: one full `run` per value on an otherwise
/// identical config, each in its own subdirectory, then a single report
/// over all cells. Cells share nothing, so any one can be reproduced alone
/// with `apply_sweep_value` + `run`.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| CassError::Config("config has no sweep section".into()))?;
    let root = cfg.resolve_out_dir();
    let mut cells = Vec::new();
    for value in &spec.values {
        let mut cell_cfg = apply_sweep_value(cfg, spec.axis, value)?;
        let label = value.label();
        cell_cfg.name = format!("{}_{label}", cfg.name);
        cell_cfg.out_dir = Some(root.join(format!("cell_{label}")));
        let outcome = run(&cell_cfg)?;
        cells.push(SweepCellReport {
            value: value.clone(),
            label,
            aggregate: outcome.aggregate,
        });
    }
    let report = SweepReport {
        experiment: cfg.name.clone(),
        axis: spec.axis,
        cells,
    };
    std::fs::create_dir_all(&root)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(root.join("sweep_report.json"), json)?;
    Ok(report)
}

/// Flattens a sweep report into robustness-statistic cells for one metric
/// at one label fraction, using each cell's mean over seeds.
pub fn robustness_cells(
    report: &SweepReport,
    metric: &str,
    label_fraction: f64,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for (i, cell) in report.cells.iter().enumerate() {
        let sweep_value = match &cell.value {
            SweepValue::Number(v) => *v,
            // Categorical axes index by position.
            _ => i as f64,
        };
        for row in &cell.aggregate.rows {
            if row.metric == metric && row.label_fraction == label_fraction {
                cells.push(SweepCell {
                    method: cell.aggregate.method.tag().to_string(),
                    architecture: row.arch.clone(),
                    sweep_value,
                    metric: row.mean,
                });
            }
        }
    }
    if cells.is_empty() {
        return Err(CassError::Contract(format!(
            "sweep report has no rows for metric '{metric}' at fraction {label_fraction}"
        )));
    }
    Ok(cells)
}

/// Per-method cost sheet of one pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodCost {
    pub method: Method,
    pub counters: CostCounters,
    pub wall_clock_seconds: BTreeMap<String, f64>,
    pub total_wall_clock: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub cass: MethodCost,
    pub dino: MethodCost,
    /// dino / cass wall clock; > 1 means the siamese method is faster.
    pub wall_clock_ratio: f64,
    /// dino / cass augmentation applications.
    pub augmentation_ratio: f64,
    /// 1 - cass/dino wall clock.
    pub time_saved_fraction: f64,
}

fn method_cost(method: Method, record: &RunRecord) -> MethodCost {
    MethodCost {
        method,
        counters: record.counters,
        wall_clock_seconds: record.wall_clock_seconds.clone(),
        total_wall_clock: record.wall_clock_seconds.values().sum(),
    }
}

/// Pretrains both methods once on a matched budget and itemizes costs.
///
/// Budgets must agree on dataset, epoch count, and batch size, and the
/// baseline's architecture must be one of the siamese arms; anything else
/// is a contract error, not a silently skewed comparison.
pub fn compare_cost(
    cass_cfg: &ExperimentConfig,
    dino_cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<CostReport> {
    if cass_cfg.method != Method::Cass || dino_cfg.method != Method::Dino {
        return Err(CassError::Contract(
            "compare_cost takes one siamese config and one distillation config".into(),
        ));
    }
    if cass_cfg.dataset != dino_cfg.dataset {
        return Err(CassError::Contract(
            "cost comparison needs identical dataset descriptors".into(),
        ));
    }
    if cass_cfg.pretrain.epochs != dino_cfg.dino.epochs {
        return Err(CassError::Contract(format!(
            "epoch budgets differ: {} vs {}",
            cass_cfg.pretrain.epochs, dino_cfg.dino.epochs
        )));
    }
    if cass_cfg.pretrain.batch_size != dino_cfg.dino.batch_size {
        return Err(CassError::Contract(format!(
            "batch budgets differ: {} vs {}",
            cass_cfg.pretrain.batch_size, dino_cfg.dino.batch_size
        )));
    }
    let arm_variants = [
        cass_cfg.arm_a.variant.as_str(),
        cass_cfg.arm_b.as_ref().map(|b| b.variant.as_str()).unwrap_or(""),
    ];
    if !arm_variants.contains(&dino_cfg.arm_a.variant.as_str()) {
        return Err(CassError::Contract(format!(
            "baseline arch '{}' matches neither siamese arm {:?}",
            dino_cfg.arm_a.variant, arm_variants
        )));
    }
    cass_cfg.validate()?;
    dino_cfg.validate()?;

    let dataset = cass_cfg.dataset.build()?;
    let train_samples = dataset.indices(crate::data::Split::Train).len();

    let seed = cass_cfg.seeds[0];
    let (cass_record, _) =
        pretrain_one_seed(cass_cfg, &dataset, seed, &out_dir.join("cass"))?;
    let (dino_record, _) =
        pretrain_one_seed(dino_cfg, &dataset, dino_cfg.seeds[0], &out_dir.join("dino"))?;

    let cass = method_cost(Method::Cass, &cass_record);
    let dino = method_cost(Method::Dino, &dino_record);
    let report = CostReport {
        epochs: cass_cfg.pretrain.epochs,
        batch_size: cass_cfg.pretrain.batch_size,
        train_samples,
        wall_clock_ratio: dino.total_wall_clock / cass.total_wall_clock,
        augmentation_ratio: dino.counters.augmentation_applications as f64
            / cass.counters.augmentation_applications as f64,
        time_saved_fraction: 1.0 - cass.total_wall_clock / dino.total_wall_clock,
        cass,
        dino,
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("compare_cost.json"), json)?;
    Ok(report)
}

fn format_table(rows: &[AggregateRow]) -> String {
    let mut out = String::from("| arch | labels | metric | mean ± ci95 | n |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.0}% | {} | {:.4} ± {:.4} | {} |\n",
            r.arch,
            r.label_fraction * 100.0,
            r.metric,
            r.mean,
            r.ci95_halfwidth,
            r.n
        ));
    }
    out
}

/// Renders grayscale heatmaps next to every array dump under `dir`.
fn render_heatmaps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rendered = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = match std::fs::read_dir(&d) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "npy") {
                let map = analysis::load_map_npy(&path)?;
                if map.shape().len() == 2 {
                    let png = path.with_extension("png");
                    analysis::save_map_png(&png, &map)?;
                    rendered.push(png);
                }
            }
        }
    }
    Ok(rendered)
}

/// Writes a human-readable summary of one experiment: a mean ± CI table
/// plus heatmap renders for any analysis dumps living under its directory.
pub fn report_run(aggregate: &AggregateReport, dir: &Path) -> Result<PathBuf> {
    let mut text = format!(
        "# {} ({})\n\nseeds: {:?}",
        aggregate.experiment,
        aggregate.method.tag(),
        aggregate.seeds
    );
    if !aggregate.failed_seeds.is_empty() {
        text.push_str(&format!("  failed: {:?}", aggregate.failed_seeds));
    }
    text.push_str("\n\n");
    text.push_str(&format_table(&aggregate.rows));
    text.push_str(&format!(
        "\npretraining cost: {} augmentations, {} forward passes, {} parameter copies\n",
        aggregate.pretrain_cost.counters.augmentation_applications,
        aggregate.pretrain_cost.counters.forward_passes,
        aggregate.pretrain_cost.counters.parameter_copy_ops
    ));
    for (phase, secs) in &aggregate.pretrain_cost.wall_clock_mean {
        text.push_str(&format!("mean {phase} wall clock: {secs:.3}s\n"));
    }
    let heatmaps = render_heatmaps(dir)?;
    if !heatmaps.is_empty() {
        text.push_str("\nheatmaps:\n");
        for h in &heatmaps {
            text.push_str(&format!("- {}\n", h.display()));
        }
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join("report.md");
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Per-(arch, metric) series of (axis value, mean, ci95 halfwidth) points.
type SweepSeries = BTreeMap<(String, String), Vec<(f64, f64, f64)>>;

/// Writes the sweep summary: per-cell tables plus one metric-vs-axis line
/// plot per (arch, metric) pair, with 95% CI whiskers.
pub fn report_sweep(report: &SweepReport, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut text = format!("# {} sweep over {:?}\n\n", report.experiment, report.axis);

    // Collect (arch, metric) -> [(x, mean, ci)] across cells.
    let mut lines: SweepSeries = BTreeMap::new();
    for (i, cell) in report.cells.iter().enumerate() {
        text.push_str(&format!("## {:?} = {}\n\n", report.axis, cell.label));
        text.push_str(&format_table(&cell.aggregate.rows));
        text.push('\n');
        let x = match &cell.value {
            SweepValue::Number(v) => *v,
            _ => i as f64,
        };
        for row in &cell.aggregate.rows {
            lines
                .entry((row.arch.clone(), row.metric.clone()))
                .or_default()
                .push((x, row.mean, row.ci95_halfwidth));
        }
    }

    let mut by_metric: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for ((arch, metric), pts) in lines {
        let series = Series::new(
            &arch,
            pts.iter().map(|&(x, y, _)| (x, y)).collect(),
        )
        .with_ci(pts.iter().map(|&(_, _, c)| c).collect());
        by_metric.entry(metric).or_default().push(series);
    }
    for (metric, series) in by_metric {
        let plot_path = dir.join(format!("{metric}_vs_{:?}.png", report.axis).to_lowercase());
        line_plot(&plot_path, &series)?;
        text.push_str(&format!("plot: {}\n", plot_path.display()));
    }

    let path = dir.join("sweep_report.md");
    std::fs::write(&path, text)?;
    Ok(path)
}
