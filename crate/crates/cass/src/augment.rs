//! The single-view augmentation pipeline.
//!
//! Images are `(3, H, W)` tensors with values in `[0, 1]`. One call to
//! [`Augmenter::apply`] runs the canonical stage order
//! resize -> jitter/perspective -> jitter/affine -> hflip -> vflip ->
//! extras -> normalize, draws all randomness from the caller's generator,
//! and bumps the per-run application counter exactly once. The siamese
//! trainer feeds the same augmented tensor to both arms, so the counter is
//! also the per-sample view count.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CassError, Result};
use crate::tensor::Tensor;

/// Optional pipeline stages toggled by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraAug {
    Solarize,
    GaussianBlur,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub target_size: (usize, usize),
    pub jitter_or_perspective_p: f64,
    pub perspective_distortion: f64,
    pub jitter_or_affine_p: f64,
    pub affine_degrees: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub jitter_strength: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub solarize_threshold: f64,
    pub blur_sigma: (f64, f64),
    pub extra: BTreeSet<ExtraAug>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_size: (384, 384),
            jitter_or_perspective_p: 0.3,
            perspective_distortion: 0.2,
            jitter_or_affine_p: 0.3,
            affine_degrees: 10.0,
            hflip_p: 0.3,
            vflip_p: 0.3,
            jitter_strength: 0.2,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            solarize_threshold: 0.5,
            blur_sigma: (0.1, 2.0),
            extra: BTreeSet::new(),
        }
    }
}

impl AugmentConfig {
    /// Same pipeline scaled to a small square, for desk-sized runs.
    pub fn desk(side: usize) -> Self {
        AugmentConfig {
            target_size: (side, side),
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("jitter_or_perspective_p", self.jitter_or_perspective_p),
            ("jitter_or_affine_p", self.jitter_or_affine_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CassError::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(CassError::Config("norm_std entries must be positive".into()));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(CassError::Config("target_size must be nonzero".into()));
        }
        Ok(())
    }
}

/// Counts augmentation applications across a run; one increment per sample.
#[derive(Debug, Default)]
pub struct AugmentCounter(AtomicU64);

impl AugmentCounter {
    pub fn new() -> Self {
        AugmentCounter(AtomicU64::new(0))
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Ordered stage descriptors for audit logs.
pub fn pipeline_signature(cfg: &AugmentConfig) -> Vec<String> {
    let mut sig = vec![
        format!("resize({}x{})", cfg.target_size.0, cfg.target_size.1),
        format!(
            "jitter_or_perspective(p={},distortion={})",
            cfg.jitter_or_perspective_p, cfg.perspective_distortion
        ),
        format!(
            "jitter_or_affine(p={},degrees={})",
            cfg.jitter_or_affine_p, cfg.affine_degrees
        ),
        format!("hflip(p={})", cfg.hflip_p),
        format!("vflip(p={})", cfg.vflip_p),
    ];
    for extra in &cfg.extra {
        match extra {
            ExtraAug::Solarize => sig.push(format!("solarize(threshold={})", cfg.solarize_threshold)),
            ExtraAug::GaussianBlur => sig.push(format!(
                "gaussian_blur(sigma=[{},{}])",
                cfg.blur_sigma.0, cfg.blur_sigma.1
            )),
        }
    }
    sig.push(format!(
        "normalize(mean={:?},std={:?})",
        cfg.norm_mean, cfg.norm_std
    ));
    sig
}

/// Owns a config plus the run's application counter.
#[derive(Debug, Default)]
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub counter: AugmentCounter,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Augmenter {
            cfg,
            counter: AugmentCounter::new(),
        })
    }

    /// Runs the full pipeline on one `(3, h, w)` image in `[0, 1]`.
    pub fn apply<R: Rng>(&self, image: &Tensor, rng: &mut R) -> Result<Tensor> {
        let cfg = &self.cfg;
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(CassError::InvalidInput(format!(
                "expected RGB image (3, h, w), got {:?}",
                image.shape()
            )));
        }
        if !image.all_finite() {
            return Err(CassError::InvalidInput("image contains non-finite values".into()));
        }
        let (th, tw) = cfg.target_size;
        let mut img = resize_bilinear(image, th, tw);

        if rng.gen::<f64>() < cfg.jitter_or_perspective_p {
            if rng.gen::<f64>() < 0.5 {
                color_jitter(&mut img, cfg.jitter_strength, rng);
            } else {
                img = random_perspective(&img, cfg.perspective_distortion, rng);
            }
        }
        if rng.gen::<f64>() < cfg.jitter_or_affine_p {
            if rng.gen::<f64>() < 0.5 {
                color_jitter(&mut img, cfg.jitter_strength, rng);
            } else {
                let deg = rng.gen_range(-cfg.affine_degrees..=cfg.affine_degrees);
                img = rotate_about_center(&img, deg);
            }
        }
        if rng.gen::<f64>() < cfg.hflip_p {
            flip_horizontal(&mut img);
        }
        if rng.gen::<f64>() < cfg.vflip_p {
            flip_vertical(&mut img);
        }
        for extra in &cfg.extra {
            match extra {
                ExtraAug::Solarize => solarize(&mut img, cfg.solarize_threshold),
                ExtraAug::GaussianBlur => {
                    let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
                    img = gaussian_blur(&img, sigma);
                }
            }
        }
        normalize(&mut img, &cfg.norm_mean, &cfg.norm_std);
        self.counter.bump();
        Ok(img)
    }
}

/// Inverts the final normalization stage.
pub fn denormalize(image: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Tensor {
    let mut out = image.clone();
    per_channel(&mut out, |c, v| v * std[c] + mean[c]);
    out
}

fn normalize(image: &mut Tensor, mean: &[f64; 3], std: &[f64; 3]) {
    per_channel(image, |c, v| (v - mean[c]) / std[c]);
}

fn per_channel(image: &mut Tensor, f: impl Fn(usize, f64) -> f64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    for c in 0..3 {
        for v in &mut image.data_mut()[c * plane..(c + 1) * plane] {
            *v = f(c, *v);
        }
    }
}

/// Bilinear resize with edge clamping (align_corners=false convention).
pub fn resize_bilinear(image: &Tensor, th: usize, tw: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) == (th, tw) {
        return image.clone();
    }
    let mut out = Tensor::zeros(&[3, th, tw]);
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for c in 0..3 {
        let src = &image.data()[c * h * w..(c + 1) * h * w];
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
                let v = src[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + src[y0 * w + x1] * (1.0 - wy) * wx
                    + src[y1 * w + x0] * wy * (1.0 - wx)
                    + src[y1 * w + x1] * wy * wx;
                out.data_mut()[(c * th + oy) * tw + ox] = v;
            }
        }
    }
    out
}

/// Bilinear sample at fractional coordinates; zero outside the frame.
fn sample(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let mut acc = 0.0;
    for (dy, fy) in [(0.0, 1.0 - wy), (1.0, wy)] {
        let yy = y0 + dy;
        if yy < 0.0 || yy > (h - 1) as f64 {
            continue;
        }
        for (dx, fx) in [(0.0, 1.0 - wx), (1.0, wx)] {
            let xx = x0 + dx;
            if xx < 0.0 || xx > (w - 1) as f64 {
                continue;
            }
            acc += src[yy as usize * w + xx as usize] * fy * fx;
        }
    }
    acc
}

fn warp(image: &Tensor, map: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        let src = &image.data()[c * h * w..(c + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let (sy, sx) = map(oy as f64, ox as f64);
                out.data_mut()[(c * h + oy) * w + ox] = sample(src, h, w, sy, sx);
            }
        }
    }
    out
}

fn rotate_about_center(image: &Tensor, degrees: f64) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    // Inverse rotation: sample source at the back-rotated coordinate.
    warp(image, |oy, ox| {
        let dy = oy - cy;
        let dx = ox - cx;
        (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
    })
}

fn flip_horizontal(image: &mut Tensor) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    for c in 0..3 {
        for y in 0..h {
            let row = &mut image.data_mut()[(c * h + y) * w..(c * h + y + 1) * w];
            row.reverse();
        }
    }
}

fn flip_vertical(image: &mut Tensor) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    for c in 0..3 {
        for y in 0..h / 2 {
            for x in 0..w {
                let a = (c * h + y) * w + x;
                let b = (c * h + (h - 1 - y)) * w + x;
                image.data_mut().swap(a, b);
            }
        }
    }
}

fn solarize(image: &mut Tensor, threshold: f64) {
    for v in image.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    // Kernel side ~5% of the image side, odd, at least 3.
    let side = h.min(w);
    let mut k = ((side as f64) * 0.05).round() as usize;
    if k.is_multiple_of(2) {
        k += 1;
    }
    let k = k.max(3);
    let half = (k / 2) as isize;
    let mut kernel = Vec::with_capacity(k);
    for i in 0..k {
        let d = i as isize - half;
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }

    // Separable passes with replicate padding.
    let mut tmp = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        let src = &image.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += src[y * w + xx] * kv;
                }
                tmp.data_mut()[(c * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        let src = &tmp.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += src[yy * w + x] * kv;
                }
                out.data_mut()[(c * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, saturation, then hue; factors drawn from the
/// strength window, every value clamped back to `[0, 1]`.
fn color_jitter<R: Rng>(image: &mut Tensor, strength: f64, rng: &mut R) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let brightness = rng.gen_range(1.0 - strength..=1.0 + strength);
    let contrast = rng.gen_range(1.0 - strength..=1.0 + strength);
    let saturation = rng.gen_range(1.0 - strength..=1.0 + strength);
    let hue_shift = rng.gen_range(-strength..=strength);

    for v in image.data_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }

    let mean: f64 = {
        let d = image.data();
        (0..plane)
            .map(|p| luma(d[p], d[plane + p], d[2 * plane + p]))
            .sum::<f64>()
            / plane as f64
    };
    for v in image.data_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }

    for p in 0..plane {
        let d = image.data();
        let (r, g, b) = (d[p], d[plane + p], d[2 * plane + p]);
        let gray = luma(r, g, b);
        let dm = image.data_mut();
        dm[p] = ((r - gray) * saturation + gray).clamp(0.0, 1.0);
        dm[plane + p] = ((g - gray) * saturation + gray).clamp(0.0, 1.0);
        dm[2 * plane + p] = ((b - gray) * saturation + gray).clamp(0.0, 1.0);
    }

    for p in 0..plane {
        let d = image.data();
        let (r, g, b) = (d[p], d[plane + p], d[2 * plane + p]);
        let (nr, ng, nb) = shift_hue(r, g, b, hue_shift);
        let dm = image.data_mut();
        dm[p] = nr.clamp(0.0, 1.0);
        dm[plane + p] = ng.clamp(0.0, 1.0);
        dm[2 * plane + p] = nb.clamp(0.0, 1.0);
    }
}

/// Rotates hue by `shift` turns via the HSV representation.
fn shift_hue(r: f64, g: f64, b: f64, shift: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta < 1e-12 {
        return (r, g, b);
    }
    let mut hue = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    hue = (hue + shift).rem_euclid(1.0);
    let s = delta / max.max(1e-12);
    let v = max;

    let hh = hue * 6.0;
    let i = hh.floor() as i64 % 6;
    let f = hh - hh.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Random four-corner perspective in the torchvision style: corners move
/// inward by up to `distortion * half_size`, and the output samples the
/// source through the fitted homography.
fn random_perspective<R: Rng>(image: &Tensor, distortion: f64, rng: &mut R) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let dh = distortion * h as f64 / 2.0;
    let dw = distortion * w as f64 / 2.0;
    let corners = [
        (0.0, 0.0),
        (0.0, (w - 1) as f64),
        ((h - 1) as f64, (w - 1) as f64),
        ((h - 1) as f64, 0.0),
    ];
    let mut moved = [(0.0, 0.0); 4];
    for (i, &(cy, cx)) in corners.iter().enumerate() {
        let sy = if cy == 0.0 { 1.0 } else { -1.0 };
        let sx = if cx == 0.0 { 1.0 } else { -1.0 };
        moved[i] = (
            cy + sy * rng.gen_range(0.0..=dh),
            cx + sx * rng.gen_range(0.0..=dw),
        );
    }
    // Homography taking each moved corner back to its source corner.
    let hmat = match fit_homography(&moved, &corners) {
        Some(m) => m,
        None => return image.clone(),
    };
    warp(image, |oy, ox| {
        let d = hmat[6] * ox + hmat[7] * oy + 1.0;
        let sx = (hmat[0] * ox + hmat[1] * oy + hmat[2]) / d;
        let sy = (hmat[3] * ox + hmat[4] * oy + hmat[5]) / d;
        (sy, sx)
    })
}

/// Solves the 8-dof homography mapping `from[i] -> to[i]` (y, x pairs).
#[allow(clippy::needless_range_loop)]
fn fit_homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<[f64; 8]> {
    // Coordinates as (x, y) for the standard formulation.
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (fy, fx) = from[i];
        let (ty, tx) = to[i];
        a[2 * i] = [fx, fy, 1.0, 0.0, 0.0, 0.0, -fx * tx, -fy * tx, tx];
        a[2 * i + 1] = [0.0, 0.0, 0.0, fx, fy, 1.0, -fx * ty, -fy * ty, ty];
    }
    // Gaussian elimination with partial pivoting on the 8x9 system.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&r1, &r2| {
            a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let pv = a[col][col];
        for j in col..9 {
            a[col][j] /= pv;
        }
        for r in 0..8 {
            if r != col && a[r][col] != 0.0 {
                let f = a[r][col];
                for j in col..9 {
                    a[r][j] -= f * a[col][j];
                }
            }
        }
    }
    let mut h = [0.0; 8];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    Some(h)
}
