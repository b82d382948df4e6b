//! Qualitative and robustness analysis over trained arms.
//!
//! Covers convolutional feature-map extraction, class-attention maps for
//! the transformer arm (single maps and sample averages), and the
//! mean-variance robustness statistic over sweep grids. All extraction is
//! observation-only: it never mutates the model it reads.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use crate::arms::{Arm, Family, TapFlags};
use crate::error::{CassError, Result};
use crate::tensor::Tensor;

/// Activations captured after one named CNN stage for a single image.
#[derive(Debug, Clone)]
pub struct FeatureMapDump {
    pub layer_id: String,
    /// `(channels, H, W)` activation block.
    pub tensor: Tensor,
    pub checkpoint_id: String,
    pub image_id: String,
}

/// A sample-averaged attention map plus its provenance.
#[derive(Debug, Clone)]
pub struct AttentionAverage {
    /// `(H, W)` grid, min-max normalized to `[0, 1]`.
    pub map: Tensor,
    pub n_samples: usize,
    /// Head/layer aggregation the per-sample maps used.
    pub aggregation: String,
}

/// How to collapse per-layer attention into one class-token map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Class-token attention row of the final layer, averaged over heads.
    LastLayerCls,
    /// Attention rollout: per-layer head means mixed with the identity
    /// (`0.5 A + 0.5 I`) and multiplied across layers before reading the
    /// class-token row.
    Rollout,
}

impl Aggregation {
    pub fn label(self) -> &'static str {
        match self {
            Aggregation::LastLayerCls => "last_layer_cls",
            Aggregation::Rollout => "rollout",
        }
    }
}

fn single_image_batch(image: &Tensor) -> Result<Tensor> {
    let sh = image.shape();
    if sh.len() != 3 {
        return Err(CassError::Contract(format!(
            "expected one (C, H, W) image, got shape {sh:?}"
        )));
    }
    let mut batched = Tensor::zeros(&[1, sh[0], sh[1], sh[2]]);
    batched.data_mut().copy_from_slice(image.data());
    Ok(batched)
}

/// Captures post-activation feature maps from a CNN arm for one image.
///
/// Purely observational: parameters and later forward passes are
/// unaffected. Requesting a stage the model does not have is an error
/// naming the stages it does.
pub fn extract_feature_maps(
    arm: &Arm,
    image: &Tensor,
    layer_ids: &[&str],
    checkpoint_id: &str,
    image_id: &str,
) -> Result<Vec<FeatureMapDump>> {
    if arm.spec.family != Family::Cnn {
        return Err(CassError::Contract(format!(
            "feature maps come from the CNN family, arm is {:?}",
            arm.spec.family
        )));
    }
    let batch = single_image_batch(image)?;
    let (out, _) = arm.forward(
        &batch,
        TapFlags {
            feature_maps: true,
            attention: false,
        },
    )?;

    let mut dumps = Vec::with_capacity(layer_ids.len());
    for &wanted in layer_ids {
        let (name, tap) = out
            .feature_maps
            .iter()
            .find(|(name, _)| name == wanted)
            .ok_or_else(|| {
                let known: Vec<&str> =
                    out.feature_maps.iter().map(|(n, _)| n.as_str()).collect();
                CassError::Contract(format!(
                    "no feature map layer '{wanted}'; model exposes {known:?}"
                ))
            })?;
        let sh = tap.shape();
        debug_assert_eq!(sh[0], 1);
        let mut map = Tensor::zeros(&[sh[1], sh[2], sh[3]]);
        map.data_mut().copy_from_slice(tap.data());
        if map.data().iter().any(|v| !v.is_finite()) {
            return Err(CassError::Contract(format!(
                "feature map '{name}' contains non-finite values"
            )));
        }
        dumps.push(FeatureMapDump {
            layer_id: name.clone(),
            tensor: map,
            checkpoint_id: checkpoint_id.to_string(),
            image_id: image_id.to_string(),
        });
    }
    Ok(dumps)
}

/// Checks one layer's `(heads, T, T)` attention block: finite entries and
/// row-stochastic rows within `1e-6`.
fn check_attention_block(layer: &str, attn: &Tensor) -> Result<(usize, usize)> {
    let sh = attn.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(CassError::Contract(format!(
            "attention block '{layer}' must be (heads, T, T), got {sh:?}"
        )));
    }
    let (heads, t) = (sh[0], sh[1]);
    for h in 0..heads {
        for r in 0..t {
            let row = &attn.data()[(h * t + r) * t..(h * t + r + 1) * t];
            let sum: f64 = row.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
                return Err(CassError::Contract(format!(
                    "attention row ({layer}, head {h}, row {r}) sums to {sum}, expected 1"
                )));
            }
        }
    }
    Ok((heads, t))
}

/// Mean over heads of one `(heads, T, T)` block, as a dense `T x T` matrix.
fn head_mean(attn: &Tensor, heads: usize, t: usize) -> Vec<f64> {
    let mut mean = vec![0.0; t * t];
    for h in 0..heads {
        for (m, &v) in mean
            .iter_mut()
            .zip(&attn.data()[h * t * t..(h + 1) * t * t])
        {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= heads as f64;
    }
    mean
}

/// Class-token attention over patch tokens via attention rollout.
///
/// Each layer's head-mean matrix is mixed with the identity,
/// `0.5 A + 0.5 I`, and the mixes are multiplied last-layer-first; the
/// returned vector is the class-token row over the `T - 1` patch tokens.
/// Layers are `(heads, T, T)` blocks in forward order.
pub fn rollout_cls_attention(layers: &[&Tensor]) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(CassError::Contract("rollout needs at least one layer".into()));
    }
    let (heads0, t) = check_attention_block("layer1", layers[0])?;
    let mut rolled: Option<Vec<f64>> = None;
    for (l, attn) in layers.iter().enumerate() {
        let (heads, tl) = check_attention_block(&format!("layer{}", l + 1), attn)?;
        if tl != t || heads != heads0 {
            return Err(CassError::Contract(format!(
                "layer {} is {heads} heads x {tl} tokens, layer 1 was {heads0} x {t}",
                l + 1
            )));
        }
        let mut mixed = head_mean(attn, heads, t);
        for v in mixed.iter_mut() {
            *v *= 0.5;
        }
        for d in 0..t {
            mixed[d * t + d] += 0.5;
        }
        rolled = Some(match rolled {
            None => mixed,
            // Later layers act on the output of earlier ones: R <- A_l R.
            Some(prev) => {
                let mut next = vec![0.0; t * t];
                for i in 0..t {
                    for k in 0..t {
                        let a = mixed[i * t + k];
                        if a == 0.0 {
                            continue;
                        }
                        for j in 0..t {
                            next[i * t + j] += a * prev[k * t + j];
                        }
                    }
                }
                next
            }
        });
    }
    let rolled = rolled.unwrap();
    Ok(rolled[1..t].to_vec())
}

/// Class-token attention over patch tokens from the final layer only,
/// averaged over heads.
pub fn last_layer_cls_attention(last: &Tensor) -> Result<Vec<f64>> {
    let (heads, t) = check_attention_block("last", last)?;
    let mean = head_mean(last, heads, t);
    Ok(mean[1..t].to_vec())
}

/// Min-max normalizes a slice into `[0, 1]` in place; constant inputs map
/// to a flat 0.5 so renders stay neutral gray.
fn min_max_normalize(values: &mut [f64]) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() {
        values.fill(0.5);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - min) / (max - min);
    }
}

/// Bilinear upsample of one `(h, w)` plane (align_corners=false).
fn upsample_plane(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut out = vec![0.0; th * tw];
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for oy in 0..th {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..tw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            out[oy * tw + ox] = src[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0 * w + x1] * (1.0 - wy) * wx
                + src[y1 * w + x0] * wy * (1.0 - wx)
                + src[y1 * w + x1] * wy * wx;
        }
    }
    out
}

/// Infers the patch grid from the image size and token count; the class
/// token accounts for the extra token.
fn patch_grid(hw: (usize, usize), tokens: usize) -> Result<(usize, usize)> {
    let (h, w) = hw;
    let patches = tokens.checked_sub(1).filter(|&p| p > 0).ok_or_else(|| {
        CassError::Contract(format!("token count {tokens} leaves no patch tokens"))
    })?;
    for p in 1..=h.min(w) {
        if h % p == 0 && w % p == 0 && (h / p) * (w / p) == patches {
            return Ok((h / p, w / p));
        }
    }
    Err(CassError::Contract(format!(
        "no patch size maps {patches} patch tokens onto a {h}x{w} image"
    )))
}

/// Class-token attention map for one image through a transformer arm.
///
/// The class token's attention over patch tokens (head-averaged, from the
/// final layer or rolled out across layers) is reshaped onto the patch
/// grid, bilinearly upsampled to the input size, and min-max normalized
/// into `[0, 1]`.
pub fn attention_map(arm: &Arm, image: &Tensor, aggregation: Aggregation) -> Result<Tensor> {
    if arm.spec.family != Family::Vit {
        return Err(CassError::Contract(format!(
            "attention maps come from the transformer family, arm is {:?}",
            arm.spec.family
        )));
    }
    let batch = single_image_batch(image)?;
    let (out, _) = arm.forward(
        &batch,
        TapFlags {
            feature_maps: false,
            attention: true,
        },
    )?;
    if out.attention.is_empty() {
        return Err(CassError::Contract(
            "transformer forward produced no attention taps".into(),
        ));
    }
    // Slice away the singleton batch dimension layer by layer.
    let blocks: Vec<Tensor> = out
        .attention
        .iter()
        .map(|(_, a)| {
            let sh = a.shape();
            let mut t = Tensor::zeros(&[sh[1], sh[2], sh[3]]);
            t.data_mut().copy_from_slice(a.data());
            t
        })
        .collect();

    let mut patch_attn = match aggregation {
        Aggregation::LastLayerCls => last_layer_cls_attention(blocks.last().unwrap())?,
        Aggregation::Rollout => rollout_cls_attention(&blocks.iter().collect::<Vec<_>>())?,
    };
    let tokens = blocks[0].shape()[1];
    let (gh, gw) = patch_grid(arm.spec.input_hw, tokens)?;
    let (h, w) = arm.spec.input_hw;
    let mut up = upsample_plane(&patch_attn, gh, gw, h, w);
    min_max_normalize(&mut up);
    // Keep the pre-upsample vector alive for shape sanity in debug builds.
    debug_assert_eq!(patch_attn.len(), gh * gw);
    patch_attn.clear();
    Tensor::from_vec(&[h, w], up)
}

/// Elementwise mean of equally shaped maps, then min-max renormalized.
pub fn average_maps(maps: &[Tensor], aggregation: &str) -> Result<AttentionAverage> {
    if maps.is_empty() {
        return Err(CassError::Contract("cannot average zero maps".into()));
    }
    let shape = maps[0].shape().to_vec();
    for (i, m) in maps.iter().enumerate() {
        if m.shape() != shape.as_slice() {
            return Err(CassError::Contract(format!(
                "map {i} has shape {:?}, first map has {:?}",
                m.shape(),
                shape
            )));
        }
    }
    let mut mean = vec![0.0; maps[0].len()];
    for m in maps {
        for (acc, &v) in mean.iter_mut().zip(m.data()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= maps.len() as f64;
    }
    min_max_normalize(&mut mean);
    Ok(AttentionAverage {
        map: Tensor::from_vec(&shape, mean)?,
        n_samples: maps.len(),
        aggregation: aggregation.to_string(),
    })
}

/// One observation in a robustness sweep: the final metric a method and
/// architecture reached at one sweep setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub method: String,
    pub architecture: String,
    pub sweep_value: f64,
    pub metric: f64,
}

/// Mean-variance robustness statistic per method.
///
/// For each `(method, architecture)` pair the metric's population variance
/// is taken across sweep values, then variances are averaged over
/// architectures per method. Lower means more robust. Every pair must
/// cover the full sweep grid; gaps are reported by name.
pub fn robustness_variance(cells: &[SweepCell]) -> Result<BTreeMap<String, f64>> {
    if cells.is_empty() {
        return Err(CassError::Contract("robustness grid is empty".into()));
    }
    let sweep_values: BTreeSet<u64> = cells.iter().map(|c| c.sweep_value.to_bits()).collect();
    if sweep_values.len() < 2 {
        return Err(CassError::Contract(format!(
            "robustness needs at least 2 sweep values, got {}",
            sweep_values.len()
        )));
    }

    let mut grid: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for c in cells {
        if !c.metric.is_finite() {
            return Err(CassError::Contract(format!(
                "non-finite metric in cell ({}, {}, {})",
                c.method, c.architecture, c.sweep_value
            )));
        }
        let slot = grid
            .entry((c.method.clone(), c.architecture.clone()))
            .or_default();
        if slot.insert(c.sweep_value.to_bits(), c.metric).is_some() {
            return Err(CassError::Contract(format!(
                "duplicate cell ({}, {}, {})",
                c.method, c.architecture, c.sweep_value
            )));
        }
    }

    let mut gaps = Vec::new();
    for ((method, arch), observed) in &grid {
        for &v in &sweep_values {
            if !observed.contains_key(&v) {
                gaps.push(format!("({method}, {arch}, {})", f64::from_bits(v)));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(CassError::Contract(format!(
            "robustness grid has missing cells: {}",
            gaps.join(", ")
        )));
    }

    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((method, _), observed) in &grid {
        let vals: Vec<f64> = observed.values().cloned().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        per_method.entry(method.clone()).or_default().push(var);
    }
    Ok(per_method
        .into_iter()
        .map(|(m, vars)| {
            let mean = vars.iter().sum::<f64>() / vars.len() as f64;
            (m, mean)
        })
        .collect())
}

/// Writes a tensor as an NPY v1.0 file (little-endian f64, C order).
pub fn save_map_npy(path: &Path, tensor: &Tensor) -> Result<()> {
    let shape = tensor
        .shape()
        .iter()
        .map(|d| format!("{d},"))
        .collect::<String>();
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({shape}), }}");
    // Magic (6) + version (2) + header length (2) + header must be a
    // multiple of 64 bytes, with the header newline-terminated.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(b"\x93NUMPY\x01\x00")?;
    file.write_all(&(header.len() as u16).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    for v in tensor.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads back an NPY file written by [`save_map_npy`] (v1.0, `<f8`,
/// C-order only).
pub fn load_map_npy(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(CassError::Serialization(format!(
            "{} is not an NPY v1.0 file",
            path.display()
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + header_len])
        .map_err(|e| CassError::Serialization(format!("bad NPY header: {e}")))?;
    if !header.contains("'descr': '<f8'") || !header.contains("'fortran_order': False") {
        return Err(CassError::Serialization(format!(
            "unsupported NPY layout in {}: {header}",
            path.display()
        )));
    }
    let open = header.find('(').ok_or_else(|| {
        CassError::Serialization("NPY header lacks a shape tuple".into())
    })?;
    let close = header[open..].find(')').unwrap_or(0) + open;
    let shape: Vec<usize> = header[open + 1..close]
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[10 + header_len..];
    if payload.len() != n * 8 {
        return Err(CassError::Serialization(format!(
            "NPY payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Renders a `(H, W)` map in `[0, 1]` as an 8-bit grayscale PNG heatmap.
pub fn save_map_png(path: &Path, map: &Tensor) -> Result<()> {
    let sh = map.shape();
    if sh.len() != 2 {
        return Err(CassError::Contract(format!(
            "heatmap render needs an (H, W) map, got {sh:?}"
        )));
    }
    let (h, w) = (sh[0], sh[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = map.data()[y * w + x].clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)
        .map_err(|e| CassError::Serialization(format!("png write failed: {e}")))
}
