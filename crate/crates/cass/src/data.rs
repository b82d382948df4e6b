//! Datasets: in-memory labeled images, splits, synthesis, and ingestion.
//!
//! Images are `(3, h, w)` tensors in `[0, 1]`. Splitting is stratified and
//! sized test = round(0.2 N), val = round(0.1 N), train = the rest, with
//! per-class quotas apportioned by largest remainder so the global sizes
//! are exact. The synthetic generator gives each class a color, a stripe
//! orientation, and a shape signature, which makes tiny models separate the
//! classes reliably in smoke tests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CassError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

/// A class index or a multi-hot vector, matching the task kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    MultiHot(Vec<u8>),
}

impl Label {
    /// The class used for stratification: the index itself, or the first
    /// positive bit of a multi-hot label.
    pub fn primary_class(&self) -> usize {
        match self {
            Label::Class(c) => *c,
            Label::MultiHot(bits) => bits.iter().position(|&b| b != 0).unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct LabeledImageDataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub task_kind: TaskKind,
    /// Parallel to `samples`; `None` until [`split`] has run.
    pub split_assignment: Option<Vec<Split>>,
}

impl LabeledImageDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.split_assignment {
            Some(assign) => assign
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == split)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Per-class sample counts over the given indices (primary class for
    /// multi-label data).
    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &i in indices {
            counts[self.samples[i].label.primary_class()] += 1;
        }
        counts
    }
}

/// Largest-remainder apportionment of `total` into per-class quotas
/// proportional to `counts`.
pub(crate) fn apportion(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 || total == 0 {
        return vec![0; counts.len()];
    }
    let mut quotas: Vec<usize> = Vec::with_capacity(counts.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(counts.len());
    let mut assigned = 0usize;
    for (c, &cnt) in counts.iter().enumerate() {
        let exact = total as f64 * cnt as f64 / n as f64;
        let fl = exact.floor() as usize;
        let fl = fl.min(cnt);
        quotas.push(fl);
        assigned += fl;
        remainders.push((c, exact - fl as f64));
    }
    // Hand out the leftovers by descending remainder, class index breaking
    // ties, skipping classes already exhausted.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = total.saturating_sub(assigned);
    let mut k = 0;
    while left > 0 {
        let (c, _) = remainders[k % remainders.len()];
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            left -= 1;
        }
        k += 1;
        if k > 4 * remainders.len() + total {
            break; // counts exhausted; caller sizes guarantee this is unreachable
        }
    }
    quotas
}

/// Assigns stratified train/val/test splits in place.
///
/// Deterministic per seed. Honors `test = round(0.2 N)` and
/// `val = round(0.1 N)` globally while keeping each class's representation
/// proportional.
pub fn split(dataset: &mut LabeledImageDataset, seed: u64) -> Result<()> {
    let n = dataset.len();
    if n < 10 {
        return Err(CassError::Config(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let test_n = (0.2 * n as f64).round() as usize;
    let val_n = (0.1 * n as f64).round() as usize;

    // Bucket sample indices by stratification class, shuffle within each.
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label.primary_class()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let counts: Vec<usize> = classes.iter().map(|c| by_class[c].len()).collect();
    for c in &classes {
        by_class.get_mut(c).unwrap().shuffle(&mut rng);
    }

    let test_quota = apportion(&counts, test_n);
    // Val quotas come from the per-class remainders after the test cut.
    let remaining: Vec<usize> = counts
        .iter()
        .zip(&test_quota)
        .map(|(&c, &t)| c - t)
        .collect();
    let val_quota = apportion(&remaining, val_n);

    let mut assign = vec![Split::Train; n];
    for (k, c) in classes.iter().enumerate() {
        let pool = &by_class[c];
        for (j, &idx) in pool.iter().enumerate() {
            if j < test_quota[k] {
                assign[idx] = Split::Test;
            } else if j < test_quota[k] + val_quota[k] {
                assign[idx] = Split::Val;
            }
        }
    }
    dataset.split_assignment = Some(assign);
    Ok(())
}

/// Controls for [`synth_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub task_kind: TaskKind,
    /// Ratio between the largest and smallest class counts; 1.0 = balanced.
    pub imbalance_ratio: f64,
    /// Pixel noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            classes: 5,
            image_size: 32,
            task_kind: TaskKind::Multiclass,
            imbalance_ratio: 1.0,
            noise: 0.05,
        }
    }
}

/// Per-class sample counts under the configured imbalance ratio, summing
/// exactly to `n` (geometric interpolation from ratio down to 1).
pub fn synth_class_counts(n: usize, classes: usize, ratio: f64) -> Vec<usize> {
    assert!(classes >= 1 && ratio >= 1.0);
    if classes == 1 {
        return vec![n];
    }
    let weights: Vec<f64> = (0..classes)
        .map(|c| ratio.powf(1.0 - c as f64 / (classes as f64 - 1.0)))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = Vec::with_capacity(classes);
    let mut rems: Vec<(usize, f64)> = Vec::with_capacity(classes);
    let mut assigned = 0;
    for (c, w) in weights.iter().enumerate() {
        let exact = n as f64 * w / wsum;
        let fl = exact.floor() as usize;
        counts.push(fl);
        assigned += fl;
        rems.push((c, exact - fl as f64));
    }
    rems.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        counts[rems[k % classes].0] += 1;
    }
    counts
}

fn class_color(c: usize, classes: usize) -> [f64; 3] {
    // Distinct hues around the color wheel, full saturation, value 0.85.
    let hue = c as f64 / classes as f64;
    let hh = hue * 6.0;
    let i = hh.floor() as i64 % 6;
    let f = hh - hh.floor();
    let v = 0.85;
    let p = 0.15;
    let q = v - (v - p) * f;
    let t = p + (v - p) * f;
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_class(image: &mut Tensor, class: usize, classes: usize, rng: &mut ChaCha8Rng, noise: f64) {
    let side = image.shape()[1];
    let plane = side * side;
    let color = class_color(class, classes);
    // Stripe orientation and frequency are class signatures; phase varies
    // per sample so the generator does not emit literal duplicates.
    let angle = std::f64::consts::PI * class as f64 / classes as f64;
    let freq = 2.0 + class as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin_a, cos_a) = angle.sin_cos();
    // Shape signature: centered disc whose radius steps with the class.
    let radius = side as f64 * (0.15 + 0.06 * (class % 4) as f64);
    let center = (side as f64 - 1.0) / 2.0;

    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 * cos_a + y as f64 * sin_a) / side as f64;
            let stripe = 0.5 + 0.5 * (u * freq * std::f64::consts::TAU + phase).sin();
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let inside = (dy * dy + dx * dx).sqrt() < radius;
            for (ch, &c) in color.iter().enumerate() {
                let base = c * (0.55 + 0.45 * stripe);
                let v = if inside { 1.0 - 0.6 * base } else { base };
                let v = v + rng.gen_range(-noise..=noise);
                let idx = ch * plane + y * side + x;
                image.data_mut()[idx] = (image.data()[idx] + v).clamp(0.0, 1.0);
            }
        }
    }
}

/// Generates a learnable synthetic dataset with deterministic structure.
pub fn synth_dataset(cfg: &SynthConfig, structure_seed: u64) -> Result<LabeledImageDataset> {
    if cfg.n < cfg.classes || cfg.classes == 0 {
        return Err(CassError::Config(format!(
            "need n >= classes >= 1, got n={} classes={}",
            cfg.n, cfg.classes
        )));
    }
    let counts = synth_class_counts(cfg.n, cfg.classes, cfg.imbalance_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
    let mut samples = Vec::with_capacity(cfg.n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut image = Tensor::zeros(&[3, cfg.image_size, cfg.image_size]);
            render_class(&mut image, class, cfg.classes, &mut rng, cfg.noise);
            let label = match cfg.task_kind {
                TaskKind::Multiclass => Label::Class(class),
                TaskKind::Multilabel => {
                    let mut bits = vec![0u8; cfg.classes];
                    bits[class] = 1;
                    // A second visible signature in the corner quadrant.
                    if cfg.classes > 1 && rng.gen::<f64>() < 0.3 {
                        let other = (class + 1) % cfg.classes;
                        bits[other] = 1;
                        blend_quadrant(&mut image, other, cfg.classes);
                    }
                    Label::MultiHot(bits)
                }
            };
            samples.push(Sample { image, label });
        }
    }
    Ok(LabeledImageDataset {
        samples,
        class_names: (0..cfg.classes).map(|c| format!("class_{c}")).collect(),
        task_kind: cfg.task_kind,
        split_assignment: None,
    })
}

fn blend_quadrant(image: &mut Tensor, class: usize, classes: usize) {
    let side = image.shape()[1];
    let plane = side * side;
    let color = class_color(class, classes);
    for y in 0..side / 2 {
        for x in 0..side / 2 {
            for (ch, &c) in color.iter().enumerate() {
                let idx = ch * plane + y * side + x;
                image.data_mut()[idx] = (0.3 * image.data()[idx] + 0.7 * c).clamp(0.0, 1.0);
            }
        }
    }
}

/// Stacks equal-shape `(3, h, w)` images into one `(B, 3, h, w)` batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CassError::InvalidInput("cannot stack an empty batch".into()))?;
    if first.shape().len() != 3 || first.shape()[0] != 3 {
        return Err(CassError::InvalidInput(format!(
            "expected (3, h, w) images, got {:?}",
            first.shape()
        )));
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(CassError::InvalidInput(format!(
                "mixed image shapes in batch: {:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&shape, data)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| CassError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.data_mut()[(c * h + y) * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Loads a one-directory-per-class tree as a multiclass dataset.
pub fn load_image_folder(root: &Path) -> Result<LabeledImageDataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(CassError::InvalidInput(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("unnamed")
                .to_string(),
        );
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| is_image_file(p))
            .collect();
        files.sort();
        for file in files {
            samples.push(Sample {
                image: load_image_tensor(&file)?,
                label: Label::Class(class),
            });
        }
    }
    if samples.is_empty() {
        return Err(CassError::InvalidInput(format!(
            "{} contains no images",
            root.display()
        )));
    }
    Ok(LabeledImageDataset {
        samples,
        class_names,
        task_kind: TaskKind::Multiclass,
        split_assignment: None,
    })
}

/// Loads a flat directory of images plus a delimited multi-hot label table
/// (header: sample_id then one column per class; tab or comma separated).
pub fn load_multilabel_folder(root: &Path, label_file: &Path) -> Result<LabeledImageDataset> {
    let text = std::fs::read_to_string(label_file)?;
    let delim = if text.lines().next().map(|l| l.contains('\t')).unwrap_or(false) {
        '\t'
    } else {
        ','
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CassError::InvalidInput("empty label table".into()))?;
    let class_names: Vec<String> = header
        .split(delim)
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if class_names.is_empty() {
        return Err(CassError::InvalidInput(
            "label table header has no class columns".into(),
        ));
    }

    let mut samples = Vec::new();
    for line in lines {
        let mut parts = line.split(delim);
        let id = parts
            .next()
            .ok_or_else(|| CassError::InvalidInput("label row missing sample id".into()))?
            .trim();
        let bits: Vec<u8> = parts
            .map(|p| match p.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(CassError::InvalidInput(format!(
                    "label entry '{other}' is not 0/1"
                ))),
            })
            .collect::<Result<_>>()?;
        if bits.len() != class_names.len() {
            return Err(CassError::InvalidInput(format!(
                "row for '{id}' has {} labels, header has {}",
                bits.len(),
                class_names.len()
            )));
        }
        // Find the image by trying known extensions.
        let mut found = None;
        for ext in IMAGE_EXTENSIONS {
            let candidate = root.join(format!("{id}.{ext}"));
            if candidate.exists() {
                found = Some(candidate);
                break;
            }
        }
        let path = found.ok_or_else(|| {
            CassError::InvalidInput(format!("no image found for sample id '{id}'"))
        })?;
        samples.push(Sample {
            image: load_image_tensor(&path)?,
            label: Label::MultiHot(bits),
        });
    }
    if samples.is_empty() {
        return Err(CassError::InvalidInput("label table has no rows".into()));
    }
    Ok(LabeledImageDataset {
        samples,
        class_names,
        task_kind: TaskKind::Multilabel,
        split_assignment: None,
    })
}
