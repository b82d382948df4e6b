//! Minimal raster plotting for experiment reports.
//!
//! Draws metric-versus-axis line charts straight into RGB images: axes,
//! light gridlines, numeric tick labels in a tiny built-in digit font,
//! one colored polyline with square markers per series, and optional
//! confidence whiskers. No text beyond numbers is rendered; captions
//! belong in the accompanying report file.

use std::path::Path;

use crate::error::{CassError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN_L: i64 = 64;
const MARGIN_R: i64 = 24;
const MARGIN_T: i64 = 24;
const MARGIN_B: i64 = 44;

const PALETTE: [[u8; 3]; 6] = [
    [220, 50, 47],
    [38, 139, 210],
    [133, 153, 0],
    [181, 137, 0],
    [211, 54, 130],
    [42, 161, 152],
];

/// One plotted line: points in data coordinates plus an optional CI
/// half-width per point, drawn as vertical whiskers.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub ci: Option<Vec<f64>>,
}

impl Series {
    pub fn new(label: &str, points: Vec<(f64, f64)>) -> Series {
        Series {
            label: label.to_string(),
            points,
            ci: None,
        }
    }

    pub fn with_ci(mut self, ci: Vec<f64>) -> Series {
        self.ci = Some(ci);
        self
    }
}

/// 3x5 glyphs for the characters tick labels can contain.
fn glyph(c: char) -> Option<[u8; 5]> {
    // Each row is 3 bits, most significant bit leftmost.
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

struct Canvas {
    img: image::RgbImage,
}

impl Canvas {
    fn new() -> Canvas {
        let mut img = image::RgbImage::new(WIDTH, HEIGHT);
        for p in img.pixels_mut() {
            *p = image::Rgb([255, 255, 255]);
        }
        Canvas { img }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }

    fn line(&mut self, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn marker(&mut self, x: i64, y: i64, color: [u8; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.put(x + dx, y + dy, color);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for c in s.chars() {
            if let Some(rows) = glyph(c) {
                for (ry, row) in rows.iter().enumerate() {
                    for rx in 0..3 {
                        if row & (0b100 >> rx) != 0 {
                            self.put(cx + rx as i64, y + ry as i64, color);
                        }
                    }
                }
            }
            cx += 4;
        }
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() { "0".to_string() } else { s }
    } else {
        format!("{v:.1e}")
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // Degenerate span: open a symmetric window around the value.
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Renders one metric-vs-axis chart to `path` as a PNG.
pub fn line_plot(path: &Path, series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(CassError::Contract("nothing to plot".into()));
    }
    for s in series {
        if let Some(ci) = &s.ci {
            if ci.len() != s.points.len() {
                return Err(CassError::Contract(format!(
                    "series '{}' has {} points but {} CI entries",
                    s.label,
                    s.points.len(),
                    ci.len()
                )));
            }
        }
    }

    let (x_lo, x_hi) = range_of(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = range_of(series.iter().flat_map(|s| {
        let ci = s.ci.clone().unwrap_or_else(|| vec![0.0; s.points.len()]);
        s.points
            .iter()
            .zip(ci)
            .flat_map(|(&(_, y), c)| [y - c, y + c])
            .collect::<Vec<_>>()
    }));

    let plot_w = (WIDTH as i64 - MARGIN_L - MARGIN_R) as f64;
    let plot_h = (HEIGHT as i64 - MARGIN_T - MARGIN_B) as f64;
    let px = |x: f64| MARGIN_L + ((x - x_lo) / (x_hi - x_lo) * plot_w).round() as i64;
    let py = |y: f64| HEIGHT as i64 - MARGIN_B - ((y - y_lo) / (y_hi - y_lo) * plot_h).round() as i64;

    let mut canvas = Canvas::new();
    let axis = [0, 0, 0];
    let grid = [225, 225, 225];

    // Gridlines and tick labels on both axes.
    for i in 0..=4 {
        let xv = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let gx = px(xv);
        let gy = py(yv);
        canvas.line(gx, MARGIN_T, gx, HEIGHT as i64 - MARGIN_B, grid);
        canvas.line(MARGIN_L, gy, WIDTH as i64 - MARGIN_R, gy, grid);
        let xl = tick_label(xv);
        canvas.text(gx - 2 * xl.len() as i64, HEIGHT as i64 - MARGIN_B + 8, &xl, axis);
        let yl = tick_label(yv);
        canvas.text(MARGIN_L - 6 - 4 * yl.len() as i64, gy - 2, &yl, axis);
    }
    canvas.line(MARGIN_L, MARGIN_T, MARGIN_L, HEIGHT as i64 - MARGIN_B, axis);
    canvas.line(
        MARGIN_L,
        HEIGHT as i64 - MARGIN_B,
        WIDTH as i64 - MARGIN_R,
        HEIGHT as i64 - MARGIN_B,
        axis,
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut sorted = s.points.clone();
        let ci = s.ci.clone().unwrap_or_else(|| vec![0.0; s.points.len()]);
        let mut order: Vec<usize> = (0..sorted.len()).collect();
        order.sort_by(|&a, &b| sorted[a].0.partial_cmp(&sorted[b].0).unwrap());
        sorted = order.iter().map(|&i| s.points[i]).collect();
        let ci: Vec<f64> = order.iter().map(|&i| ci[i]).collect();

        let mut prev: Option<(i64, i64)> = None;
        for (&(x, y), &c) in sorted.iter().zip(&ci) {
            let (sx, sy) = (px(x), py(y));
            if let Some((lx, ly)) = prev {
                canvas.line(lx, ly, sx, sy, color);
            }
            if c > 0.0 {
                let top = py(y + c);
                let bot = py(y - c);
                canvas.line(sx, top, sx, bot, color);
                canvas.line(sx - 2, top, sx + 2, top, color);
                canvas.line(sx - 2, bot, sx + 2, bot, color);
            }
            canvas.marker(sx, sy, color);
            prev = Some((sx, sy));
        }
        // Legend swatch with the series index, top-right corner.
        let ly = MARGIN_T + 6 + 12 * si as i64;
        let lx = WIDTH as i64 - MARGIN_R - 40;
        for dy in 0..6 {
            canvas.line(lx, ly + dy, lx + 14, ly + dy, color);
        }
        canvas.text(lx + 18, ly, &si.to_string(), axis);
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    canvas
        .img
        .save(path)
        .map_err(|e| CassError::Serialization(format!("plot write failed: {e}")))
}
