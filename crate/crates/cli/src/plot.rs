//! Minimal raster plots: parity scatter and histogram.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const SIZE: u32 = 480;
const MARGIN: u32 = 40;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GUIDE: Rgb<u8> = Rgb([200, 60, 60]);
const INK: Rgb<u8> = Rgb([30, 90, 180]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(SIZE, SIZE, WHITE),
        };
        let end = SIZE - MARGIN;
        c.line((MARGIN, end), (end, end), AXIS);
        c.line((MARGIN, MARGIN), (MARGIN, end), AXIS);
        c
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, from: (u32, u32), to: (u32, u32), color: Rgb<u8>) {
        let (mut x, mut y) = (from.0 as i64, from.1 as i64);
        let (x1, y1) = (to.0 as i64, to.1 as i64);
        let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
        let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
        let mut err = dx + dy;
        loop {
            self.put(x, y, color);
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

    fn rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
        for x in x0..=x1 {
            for y in y0..=y1 {
                self.put(x as i64, y as i64, color);
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img.save(path).with_context(|| format!("writing {}", path.display()))
    }
}

/// Pixel coordinate of `v` on `[lo, hi]` along the plotting area.
fn scale(v: f64, lo: f64, hi: f64) -> u32 {
    let span = (SIZE - 2 * MARGIN) as f64;
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    MARGIN + (t.clamp(0.0, 1.0) * span).round() as u32
}

/// Predicted against true values with the identity line.
pub fn parity(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut c = Canvas::new();
    let (lo, hi) = points
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        let flip = |y: u32| SIZE - y;
        c.line((scale(lo, lo, hi), flip(scale(lo, lo, hi))), (scale(hi, lo, hi), flip(scale(hi, lo, hi))), GUIDE);
        for &(truth, pred) in points {
            let (x, y) = (scale(truth, lo, hi), flip(scale(pred, lo, hi)));
            c.rect(x.saturating_sub(1), y.saturating_sub(1), x + 1, y + 1, INK);
        }
    }
    c.save(path)
}

/// Histogram of values on `[0, 1]` with `bins` equal-width bins.
pub fn histogram(values: &[f64], bins: usize, path: &Path) -> Result<()> {
    let mut c = Canvas::new();
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for v in values.iter().filter(|v| v.is_finite()) {
        counts[((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    for (b, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let x0 = scale(b as f64 / bins as f64, 0.0, 1.0);
        let x1 = scale((b + 1) as f64 / bins as f64, 0.0, 1.0).saturating_sub(1);
        let y = SIZE - scale(n as f64 / top, 0.0, 1.0);
        c.rect(x0 + 1, y, x1.max(x0 + 1), SIZE - MARGIN - 1, INK);
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_written_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, i as f64 * 1.01)).collect();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        parity(&pts, &a).unwrap();
        parity(&pts, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let img = image::open(&a).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (SIZE, SIZE));
        // The identity line reaches the upper-right plotting corner, clear of the points.
        assert_eq!(*img.get_pixel(SIZE - MARGIN, MARGIN), GUIDE);
        let h = dir.path().join("h.png");
        histogram(&[0.05, 0.1, 0.5, 0.95, 1.0], 10, &h).unwrap();
        let img = image::open(&h).unwrap().to_rgb8();
        assert_eq!(*img.get_pixel(MARGIN + 5, SIZE - MARGIN - 2), INK);
    }

    #[test]
    fn empty_inputs_still_produce_images() {
        let dir = tempfile::tempdir().unwrap();
        parity(&[], &dir.path().join("p.png")).unwrap();
        histogram(&[], 10, &dir.path().join("h.png")).unwrap();
    }
}
