//! Minimal raster plots: bars, curves with an overlay, histograms.
//! Axes carry no labels; the CSV next to each PNG holds the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 24;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
pub const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
pub const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
pub const RED: Rgb<u8> = Rgb([214, 39, 40]);
pub const GREEN: Rgb<u8> = Rgb([44, 160, 44]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut img = RgbImage::from_pixel(W, H, BG);
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, H - MARGIN, AXIS);
        }
        for y in MARGIN..=H - MARGIN {
            img.put_pixel(MARGIN, y, AXIS);
        }
        Self { img }
    }

    fn plot_w() -> f64 {
        f64::from(W - 2 * MARGIN)
    }

    fn plot_h() -> f64 {
        f64::from(H - 2 * MARGIN)
    }

    /// Pixel for a point in unit coordinates (0,0 bottom-left).
    fn px(u: f64, v: f64) -> (i64, i64) {
        let x = f64::from(MARGIN) + u.clamp(0.0, 1.0) * Self::plot_w();
        let y = f64::from(H - MARGIN) - v.clamp(0.0, 1.0) * Self::plot_h();
        (x.round() as i64, y.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, u0: f64, v0: f64, u1: f64, v1: f64, c: Rgb<u8>) {
        let (x0, y1) = Self::px(u0, v0);
        let (x1, y0) = Self::px(u1, v1);
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>, dashed: bool) {
        let (x0, y0) = Self::px(a.0, a.1);
        let (x1, y1) = Self::px(b.0, b.1);
        let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=n {
            if dashed && (i / 4) % 2 == 1 {
                continue;
            }
            let x = x0 + (x1 - x0) * i / n;
            let y = y0 + (y1 - y0) * i / n;
            self.put(x, y, c);
            self.put(x, y + 1, c);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

fn max_finite(v: impl Iterator<Item = f64>) -> f64 {
    let m = v.filter(|x| x.is_finite()).fold(0.0_f64, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub fn bar_chart(values: &[f64], path: &Path) -> Result<()> {
    let mut c = Canvas::new();
    let top = max_finite(values.iter().copied());
    let n = values.len().max(1) as f64;
    let colors = [BLUE, ORANGE, GREEN, RED];
    for (i, v) in values.iter().enumerate() {
        let u0 = (i as f64 + 0.15) / n;
        let u1 = (i as f64 + 0.85) / n;
        let h = if v.is_finite() { v / top } else { 1.0 };
        c.rect(u0, 0.0, u1, h, colors[i % colors.len()]);
    }
    c.save(path)
}

/// `y` against `x`, each series scaled to its own maximum; the overlay is
/// drawn dashed.
pub fn curve_with_overlay(x: &[f64], y: &[f64], overlay: Option<&[f64]>, path: &Path) -> Result<()> {
    let mut c = Canvas::new();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut draw = |ys: &[f64], col, dashed| {
        let top = max_finite(ys.iter().copied());
        for i in 1..ys.len().min(x.len()) {
            let a = ((x[i - 1] - lo) / span, ys[i - 1] / top);
            let b = ((x[i] - lo) / span, ys[i] / top);
            c.line(a, b, col, dashed);
        }
    };
    draw(y, BLUE, false);
    if let Some(o) = overlay {
        draw(o, ORANGE, true);
    }
    c.save(path)
}

/// Histogram of `values` in `bins` bins over `[lo, hi]` with vertical
/// marker lines (e.g. mean in red, median in green).
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64, markers: &[(f64, Rgb<u8>)], path: &Path) -> Result<()> {
    if bins == 0 || hi <= lo {
        return Err(Error::arg("histogram needs bins > 0 and hi > lo"));
    }
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor();
        counts[(k.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut c = Canvas::new();
    for (i, &k) in counts.iter().enumerate() {
        c.rect(i as f64 / bins as f64, 0.0, (i + 1) as f64 / bins as f64, k as f64 / top, BLUE);
    }
    for &(m, col) in markers {
        let u = (m - lo) / (hi - lo);
        c.line((u, 0.0), (u, 1.0), col, false);
    }
    c.save(path)
}
