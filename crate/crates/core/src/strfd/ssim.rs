//! Mean structural similarity over sliding uniform windows.
//!
//! Window sums come from integer summed-area tables, so every per-window
//! statistic is exact before the final division; identical inputs therefore
//! score exactly `1.0`.

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 255.0;
pub const DEFAULT_WINDOW: usize = 8;

/// Integral images of `x`, `y`, `x²`, `y²` and `xy` with a zero border row/column.
struct Integrals {
    stride: usize,
    sx: Vec<i64>,
    sy: Vec<i64>,
    sxx: Vec<i64>,
    syy: Vec<i64>,
    sxy: Vec<i64>,
}

impl Integrals {
    fn new(a: &GrayImage, b: &GrayImage) -> Self {
        let (w, h) = (a.width(), a.height());
        let stride = w + 1;
        let len = stride * (h + 1);
        let mut t = Self {
            stride,
            sx: vec![0; len],
            sy: vec![0; len],
            sxx: vec![0; len],
            syy: vec![0; len],
            sxy: vec![0; len],
        };
        for r in 0..h {
            let (mut rx, mut ry, mut rxx, mut ryy, mut rxy) = (0i64, 0i64, 0i64, 0i64, 0i64);
            for c in 0..w {
                let x = a.get(r, c) as i64;
                let y = b.get(r, c) as i64;
                rx += x;
                ry += y;
                rxx += x * x;
                ryy += y * y;
                rxy += x * y;
                let i = (r + 1) * stride + c + 1;
                let up = r * stride + c + 1;
                t.sx[i] = t.sx[up] + rx;
                t.sy[i] = t.sy[up] + ry;
                t.sxx[i] = t.sxx[up] + rxx;
                t.syy[i] = t.syy[up] + ryy;
                t.sxy[i] = t.sxy[up] + rxy;
            }
        }
        t
    }

    #[inline]
    fn window(table: &[i64], stride: usize, r0: usize, c0: usize, h: usize, w: usize) -> i64 {
        let (r1, c1) = (r0 + h, c0 + w);
        table[r1 * stride + c1] - table[r0 * stride + c1] - table[r1 * stride + c0]
            + table[r0 * stride + c0]
    }
}

/// SSIM with the default 8x8 window.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ssim_with_window(a, b, DEFAULT_WINDOW)
}

/// Mean SSIM over every `window x window` placement (stride 1). Images smaller
/// than the window use a single window covering the whole image.
pub fn ssim_with_window(a: &GrayImage, b: &GrayImage, window: usize) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.width() == 0 || a.height() == 0 || window == 0 {
        return Err(Error::Shape(
            "ssim needs non-empty images and window".into(),
        ));
    }
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let wh = window.min(a.height());
    let ww = window.min(a.width());
    let n = (wh * ww) as i64;
    let n2 = (n * n) as f64;
    let t = Integrals::new(a, b);
    let s = t.stride;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(a.height() - wh) {
        for c0 in 0..=(a.width() - ww) {
            let sx = Integrals::window(&t.sx, s, r0, c0, wh, ww);
            let sy = Integrals::window(&t.sy, s, r0, c0, wh, ww);
            let sxx = Integrals::window(&t.sxx, s, r0, c0, wh, ww);
            let syy = Integrals::window(&t.syy, s, r0, c0, wh, ww);
            let sxy = Integrals::window(&t.sxy, s, r0, c0, wh, ww);
            let mx = sx as f64 / n as f64;
            let my = sy as f64 / n as f64;
            let vx = (n * sxx - sx * sx) as f64 / n2;
            let vy = (n * syy - sy * sy) as f64 / n2;
            let cov = (n * sxy - sx * sy) as f64 / n2;
            let num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
