//! Colormapped PNG export and loss-curve rendering.

use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Value at quantile `q` (nearest rank) of the finite entries.
pub fn percentile(values: &Array2<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
    v[idx]
}

/// `x / p95(x)` clamped to `[0, 1]`, for display only.
pub fn normalize_p95(values: &Array2<f64>) -> Array2<f64> {
    let p = percentile(values, 0.95);
    let p = if p > 0.0 { p } else { 1.0 };
    values.mapv(|x| (x / p).clamp(0.0, 1.0))
}

pub fn magma(t: f64) -> [u8; 3] {
    let c = colorous::MAGMA.eval_continuous(t.clamp(0.0, 1.0));
    [c.r, c.g, c.b]
}

/// Black, red, yellow, white.
pub fn hot(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ramp = |lo: f64, hi: f64| (((t - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ramp(0.0, 0.365_079), ramp(0.365_079, 0.746_032), ramp(0.746_032, 1.0)]
}

pub fn colorize(values: &Array2<f64>, map: fn(f64) -> [u8; 3]) -> RgbImage {
    let (h, w) = values.dim();
    let norm = normalize_p95(values);
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(map(norm[[y as usize, x as usize]])))
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub const CURVE_COLORS: [[u8; 3]; 6] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// Line plot of several series against their index on a log10 y axis,
/// with light grid lines at every decade. Non-positive values are skipped.
pub fn loss_curves(series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20i64;
    let logs: Vec<Vec<Option<f64>>> = series
        .iter()
        .map(|s| s.iter().map(|v| (*v > 0.0 && v.is_finite()).then(|| v.log10())).collect())
        .collect();
    let all: Vec<f64> = logs.iter().flatten().flatten().copied().collect();
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let (pw, ph) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    draw_line(&mut img, (margin, height as i64 - margin), (width as i64 - margin, height as i64 - margin), [0; 3]);
    draw_line(&mut img, (margin, margin), (margin, height as i64 - margin), [0; 3]);
    if all.is_empty() || n < 2 || pw < 2 || ph < 2 {
        return img;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil().max(lo + 1.0);
    let to_px = |i: usize, v: f64| {
        let x = margin + (i as f64 / (n - 1) as f64 * pw as f64).round() as i64;
        let y = margin + ((hi - v) / (hi - lo) * ph as f64).round() as i64;
        (x, y)
    };
    let mut decade = lo;
    while decade <= hi {
        let (_, y) = to_px(0, decade);
        draw_line(&mut img, (margin + 1, y), (width as i64 - margin, y), [225; 3]);
        decade += 1.0;
    }
    for (k, s) in logs.iter().enumerate() {
        let color = CURVE_COLORS[k % CURVE_COLORS.len()];
        let mut prev = None;
        for (i, v) in s.iter().enumerate() {
            match v {
                Some(v) => {
                    let p = to_px(i, *v);
                    if let Some(q) = prev {
                        draw_line(&mut img, q, p, color);
                    }
                    prev = Some(p);
                }
                None => prev = None,
            }
        }
    }
    img
}
