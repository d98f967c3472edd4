mod oracles;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use woundseg::augment::{
    affine_pair, augment_pair, flip_pair, gaussian_blur, AffineParams, AugmentConfig, Flips, JitterParams,
    apply_jitter,
};
use woundseg::raster::RgbF32;
use woundseg::synthetic::ellipse_pair;
use woundseg::Mask;

fn noise_image(seed: u64, w: usize, h: usize) -> RgbF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbF32::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn noise_mask(seed: u64, w: usize, h: usize) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mask::from_fn(w, h, |_, _| rng.random_bool(0.4))
}

fn rotation(angle_deg: f64) -> AffineParams {
    AffineParams { angle_deg, ..AffineParams::IDENTITY }
}

#[test]
fn half_turn_matches_index_oracle() {
    for (w, h) in [(7, 5), (16, 16), (33, 20)] {
        let img = noise_image(1, w, h);
        let mask = noise_mask(2, w, h);
        let (ri, rm) = affine_pair(&img, &mask, &rotation(180.0)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = oracles::rotate180_index(x, y, w, h);
                assert_eq!(rm.get(x, y), mask.get(sx, sy), "mask at ({x}, {y})");
                let (a, b) = (ri.pixel(x, y), img.pixel(sx, sy));
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-5, "image at ({x}, {y})");
                }
            }
        }
    }
}

#[test]
fn tiny_sigma_blur_is_identity() {
    let img = noise_image(3, 40, 30);
    let out = gaussian_blur(&img, 25, 0.001).unwrap();
    let worst = img.as_slice().iter().zip(out.as_slice()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(worst <= 1e-3, "max deviation {worst}");
}

#[test]
fn blur_impulse_response_matches_analytic_kernel() {
    let (w, h) = (61, 61);
    let mut img = RgbF32::filled(w, h, [0.0; 3]);
    img.as_mut_slice()[(30 * w + 30) * 3] = 1.0;
    for sigma in [0.5, 1.3, 2.0] {
        let taps = oracles::gaussian_taps(25, sigma);
        let out = gaussian_blur(&img, 25, sigma).unwrap();
        for y in 18..=42 {
            for x in 18..=42 {
                let want = taps[x - 18] * taps[y - 18];
                let got = out.pixel(x, y)[0] as f64;
                assert!((got - want).abs() < 1e-6, "sigma {sigma} at ({x}, {y}): {got} vs {want}");
                assert_eq!(out.pixel(x, y)[1], 0.0);
            }
        }
    }
}

#[test]
fn constant_image_survives_blur_and_neutral_jitter() {
    let img = RgbF32::filled(20, 12, [0.3, 0.5, 0.7]);
    let out = gaussian_blur(&img, 25, 1.7).unwrap();
    assert!(img.as_slice().iter().zip(out.as_slice()).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(apply_jitter(&img, &JitterParams::IDENTITY), img);
}

#[test]
fn disabled_pipeline_returns_inputs() {
    let (img, mask) = ellipse_pair(&mut ChaCha8Rng::seed_from_u64(0), 48);
    let cfg = AugmentConfig { enabled: false, ..AugmentConfig::default() };
    let (i2, m2) = augment_pair(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(i2, img);
    assert_eq!(m2, mask);
}

#[test]
fn identity_config_returns_inputs() {
    let (img, mask) = ellipse_pair(&mut ChaCha8Rng::seed_from_u64(0), 48);
    let (i2, m2) = augment_pair(&img, &mask, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(i2, img);
    assert_eq!(m2, mask);
}

#[test]
fn flip_frequency_is_fair() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut h, mut v) = (0, 0);
    for _ in 0..10_000 {
        let f = Flips::sample(0.5, 0.5, &mut rng);
        h += f.horizontal as u32;
        v += f.vertical as u32;
    }
    for count in [h, v] {
        let freq = count as f64 / 10_000.0;
        assert!((0.45..=0.55).contains(&freq), "frequency {freq}");
    }
}

#[test]
fn flips_are_involutions() {
    let img = noise_image(4, 9, 6);
    let mask = noise_mask(5, 9, 6);
    let both = Flips { horizontal: true, vertical: true };
    let (i1, m1) = flip_pair(&img, &mask, both);
    assert_eq!(m1.get(0, 0), mask.get(8, 5));
    let (i2, m2) = flip_pair(&i1, &m1, both);
    assert_eq!((i2, m2), (img, mask));
}

/// Fraction of pixels where the warped mask agrees with the warped
/// indicator image thresholded at one half.
fn synchrony(img_mask: &Mask, params: &AffineParams) -> f64 {
    let (w, h) = (img_mask.width(), img_mask.height());
    let indicator = RgbF32::from_fn(w, h, |x, y| [img_mask.get(x, y) as f32; 3]);
    let (wi, wm) = affine_pair(&indicator, img_mask, params).unwrap();
    let agree = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| (wi.pixel(x, y)[0] >= 0.5) == (wm.get(x, y) == 1))
        .count();
    agree as f64 / (w * h) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pipeline_keeps_masks_binary_and_same_size(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, mask) = ellipse_pair(&mut rng, 64);
        let (i2, m2) = augment_pair(&img, &mask, &AugmentConfig::default(), &mut rng).unwrap();
        prop_assert_eq!((i2.width(), i2.height()), (64, 64));
        prop_assert_eq!((m2.width(), m2.height()), (64, 64));
        prop_assert!(m2.as_slice().iter().all(|&v| v <= 1));
        prop_assert!(i2.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pipeline_is_deterministic_per_seed(seed: u64) {
        let (img, mask) = ellipse_pair(&mut ChaCha8Rng::seed_from_u64(7), 48);
        let cfg = AugmentConfig::default();
        let a = augment_pair(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment_pair(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn image_and_mask_move_together(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, mask) = ellipse_pair(&mut rng, 96);
        let params = AffineParams::sample(&AugmentConfig::default(), 96, 96, &mut rng);
        let s = synchrony(&mask, &params);
        prop_assert!(s >= 0.99, "synchrony {} for {:?}", s, params);
    }
}
