//! DCT perceptual hash.
//!
//! The image is converted to luma, resized to 32x32 with a triangle filter
//! whose support widens with the downscale factor, and transformed with a
//! type-II DCT. The 8x8 block of lowest non-zero frequencies (rows and
//! columns 1 through 8) is compared against its median; the first
//! coefficient in row-major order becomes the most significant bit.

use std::f64::consts::PI;

const SIZE: usize = 32;
const BLOCK: usize = 8;
const SNAP: f64 = 1e-9;

/// Luma with weights 0.299 / 0.587 / 0.114, scaled to `[0, 1]`.
pub fn luma(img: &image::RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect()
}

/// Resampling weights along one axis, rows of `(first source index, weights)`.
fn triangle_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale;
            let lo = ((centre - support).floor().max(0.0)) as usize;
            let hi = ((centre + support).ceil() as usize).min(src);
            let mut w: Vec<f64> =
                (lo..hi).map(|j| (1.0 - ((j as f64 + 0.5 - centre) / support).abs()).max(0.0)).collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                // A single source sample covers the whole output cell.
                let nearest = (centre.floor() as usize).min(src - 1);
                return (nearest, vec![1.0]);
            }
            (lo, w)
        })
        .collect()
}

/// Separable triangle resize of a single-channel `w x h` plane.
pub fn resize_plane(plane: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let wx = triangle_weights(w, out_w);
    let wy = triangle_weights(h, out_h);
    let mut rows = vec![0.0; out_w * h];
    for y in 0..h {
        for (x, (lo, ws)) in wx.iter().enumerate() {
            rows[y * out_w + x] = ws.iter().enumerate().map(|(k, wk)| wk * plane[y * w + lo + k]).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (y, (lo, ws)) in wy.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = ws.iter().enumerate().map(|(k, wk)| wk * rows[(lo + k) * out_w + x]).sum();
        }
    }
    out
}

/// Unnormalized DCT-II coefficients `c[u][v]` for `1 <= u, v <= 8` of a
/// 32x32 plane, where `u` indexes vertical frequency.
fn low_frequency_block(plane: &[f64]) -> [f64; BLOCK * BLOCK] {
    let basis: Vec<[f64; SIZE]> = (0..=BLOCK)
        .map(|k| std::array::from_fn(|n| (PI * (2 * n + 1) as f64 * k as f64 / (2 * SIZE) as f64).cos()))
        .collect();
    // Transform rows first, keeping only the needed horizontal frequencies.
    let mut rows = [[0.0; BLOCK]; SIZE];
    for y in 0..SIZE {
        for v in 1..=BLOCK {
            rows[y][v - 1] = (0..SIZE).map(|x| plane[y * SIZE + x] * basis[v][x]).sum();
        }
    }
    let mut out = [0.0; BLOCK * BLOCK];
    for u in 1..=BLOCK {
        for v in 0..BLOCK {
            let c: f64 = (0..SIZE).map(|y| rows[y][v] * basis[u][y]).sum();
            out[(u - 1) * BLOCK + v] = if c.abs() < SNAP { 0.0 } else { c };
        }
    }
    out
}

/// Sets bit `63 - i` when coefficient `i` strictly exceeds the median.
pub fn hash_coefficients(coeffs: &[f64; 64]) -> u64 {
    let mut sorted = *coeffs;
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;
    coeffs.iter().enumerate().fold(0u64, |h, (i, &c)| if c > median { h | 1 << (63 - i) } else { h })
}

pub fn compute_phash(img: &image::RgbImage) -> u64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let small = resize_plane(&luma(img), w, h, SIZE, SIZE);
    hash_coefficients(&low_frequency_block(&small))
}

pub fn hamming_distance(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}
