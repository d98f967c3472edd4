//! Slow, direct reference implementations used to cross-check the library.
#![allow(dead_code)]

use std::f64::consts::PI;

use woundseg::Mask;

/// Direct perceptual hash: 2-D triangle resize evaluated per output pixel,
/// then the 8x8 DCT block summed in full.
pub fn phash(img: &image::RgbImage) -> u64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let lum = |x: usize, y: usize| {
        let p = img.get_pixel(x as u32, y as u32);
        (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
    };
    let weights = |src: usize, i: usize| -> Vec<f64> {
        let scale = src as f64 / 32.0;
        let support = scale.max(1.0);
        let centre = (i as f64 + 0.5) * scale;
        let raw: Vec<f64> =
            (0..src).map(|j| (1.0 - ((j as f64 + 0.5 - centre) / support).abs()).max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    };
    let mut small = [[0.0f64; 32]; 32];
    for (oy, row) in small.iter_mut().enumerate() {
        let wy = weights(h, oy);
        for (ox, cell) in row.iter_mut().enumerate() {
            let wx = weights(w, ox);
            let mut acc = 0.0;
            for y in 0..h {
                if wy[y] == 0.0 {
                    continue;
                }
                for x in 0..w {
                    acc += wy[y] * wx[x] * lum(x, y);
                }
            }
            *cell = acc;
        }
    }
    let mut coeffs = Vec::with_capacity(64);
    for u in 1..=8 {
        for v in 1..=8 {
            let mut c = 0.0;
            for (y, row) in small.iter().enumerate() {
                for (x, &val) in row.iter().enumerate() {
                    c += val
                        * (PI * (2 * y + 1) as f64 * u as f64 / 64.0).cos()
                        * (PI * (2 * x + 1) as f64 * v as f64 / 64.0).cos();
                }
            }
            coeffs.push(if c.abs() < 1e-9 { 0.0 } else { c });
        }
    }
    let mut sorted = coeffs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = (sorted[31] + sorted[32]) / 2.0;
    let mut hash = 0u64;
    for (i, c) in coeffs.iter().enumerate() {
        if *c > median {
            hash |= 1 << (63 - i);
        }
    }
    hash
}

pub fn hamming(a: u64, b: u64) -> u32 {
    let mut n = 0;
    for i in 0..64 {
        if (a >> i) & 1 != (b >> i) & 1 {
            n += 1;
        }
    }
    n
}

/// `(tp, fp, fn, tn)` summed pixel by pixel.
pub fn confusion(preds: &[Mask], gts: &[Mask]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        for y in 0..p.height() {
            for x in 0..p.width() {
                match (p.get(x, y) == 1, g.get(x, y) == 1) {
                    (true, true) => c.0 += 1,
                    (true, false) => c.1 += 1,
                    (false, true) => c.2 += 1,
                    (false, false) => c.3 += 1,
                }
            }
        }
    }
    c
}

/// IoU from raw counts, 1 when both masks are empty everywhere.
pub fn iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fn_) as f64
    }
}

/// Target index of a 180 degree turn.
pub fn rotate180_index(x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
    (w - 1 - x, h - 1 - y)
}

/// Normalized Gaussian taps straight from the density.
pub fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let c = (kernel / 2) as f64;
    let raw: Vec<f64> = (0..kernel)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Brightness offset applied in 8-bit space with saturation.
pub fn brighten(img: &image::RgbImage, delta: i16) -> image::RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p[c] = (p[c] as i16 + delta).clamp(0, 255) as u8;
        }
    }
    out
}
