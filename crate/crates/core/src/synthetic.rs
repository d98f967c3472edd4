//! Procedural images for tests, demos and smoke training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::Mask;
use crate::raster::RgbF32;

/// A skin-toned frame with one dark-red elliptical wound and its mask.
pub fn ellipse_pair<R: Rng + ?Sized>(rng: &mut R, size: usize) -> (RgbF32, Mask) {
    let s = size as f64;
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let a = rng.random_range(s / 8.0..s / 4.0);
    let b = rng.random_range(s / 8.0..s / 4.0);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let skin = [rng.random_range(0.75..0.9), rng.random_range(0.55..0.7), rng.random_range(0.45..0.6)];
    let wound = [rng.random_range(0.5..0.65), rng.random_range(0.08..0.18), rng.random_range(0.08..0.18)];
    let shade = rng.random_range(-0.08..0.08);
    let inside = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let u = (dx * cos + dy * sin) / a;
        let v = (-dx * sin + dy * cos) / b;
        u * u + v * v <= 1.0
    };
    let img = RgbF32::from_fn(size, size, |x, y| {
        let base = if inside(x, y) { wound } else { skin };
        let g = shade * (x as f64 / s - 0.5);
        base.map(|c| (c + g).clamp(0.0, 1.0) as f32)
    });
    (img, Mask::from_fn(size, size, inside))
}

pub fn ellipse_dataset(n: usize, size: usize, seed: u64) -> Vec<(RgbF32, Mask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ellipse_pair(&mut rng, size)).collect()
}

/// A smooth, seed-specific colour pattern built from random Gaussian blobs
/// and plane waves. Different seeds give perceptually unrelated images.
pub fn procedural_image(seed: u64, width: u32, height: u32) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..6)
        .map(|_| {
            let centre = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
            let radius = rng.random_range(0.08..0.3) * w.min(h);
            let colour = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            (centre, radius, colour)
        })
        .collect();
    let waves: Vec<([f64; 2], f64, f64)> = (0..3)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / w.max(h);
            ([angle.cos() * freq, angle.sin() * freq], rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.1..0.3))
        })
        .collect();
    let base = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    image::RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let mut px = base;
        for (c, r, col) in &blobs {
            let d2 = ((fx - c[0]).powi(2) + (fy - c[1]).powi(2)) / (r * r);
            let g = (-d2).exp() * 0.45;
            for k in 0..3 {
                px[k] += col[k] * g;
            }
        }
        for (k, (dir, phase, amp)) in waves.iter().enumerate() {
            px[k % 3] += amp * (dir[0] * fx + dir[1] * fy + phase).sin();
        }
        image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}
