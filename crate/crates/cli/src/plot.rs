//! Minimal line charts: one panel per parameter, value against epoch, with
//! the ground truth drawn as a horizontal rule.

use image::{Rgb, RgbImage};

const W: u32 = 640;
const PANEL_H: u32 = 200;
const MARGIN: i64 = 20;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
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

/// `series[k]` is the per-epoch value of parameter `k`.
pub fn convergence_plot(series: &[Vec<f64>], truth: &[Option<f64>]) -> RgbImage {
    let n = series.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(W, PANEL_H * n, Rgb([255, 255, 255]));
    for (k, values) in series.iter().enumerate() {
        let top = k as i64 * PANEL_H as i64;
        let (x_lo, x_hi) = (MARGIN, W as i64 - MARGIN);
        let (y_lo, y_hi) = (top + MARGIN, top + PANEL_H as i64 - MARGIN);
        let axis = Rgb([0, 0, 0]);
        line(&mut img, (x_lo, y_hi), (x_hi, y_hi), axis);
        line(&mut img, (x_lo, y_lo), (x_lo, y_hi), axis);
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let mut lo = finite.clone().fold(f64::INFINITY, f64::min);
        let mut hi = finite.fold(f64::NEG_INFINITY, f64::max);
        if let Some(Some(t)) = truth.get(k) {
            lo = lo.min(*t);
            hi = hi.max(*t);
        }
        if !lo.is_finite() || !hi.is_finite() {
            continue;
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let to_y = |v: f64| y_hi - (((v - lo) / (hi - lo)) * (y_hi - y_lo) as f64).round() as i64;
        let n_pts = values.len().max(2) - 1;
        let to_x = |i: usize| x_lo + ((i as f64 / n_pts as f64) * (x_hi - x_lo) as f64).round() as i64;
        if let Some(Some(t)) = truth.get(k) {
            let y = to_y(*t);
            let mut x = x_lo;
            while x < x_hi {
                line(&mut img, (x, y), ((x + 6).min(x_hi), y), Rgb([200, 40, 40]));
                x += 12;
            }
        }
        for i in 1..values.len() {
            if values[i - 1].is_finite() && values[i].is_finite() {
                line(&mut img, (to_x(i - 1), to_y(values[i - 1])), (to_x(i), to_y(values[i])), Rgb([30, 70, 200]));
            }
        }
    }
    img
}
