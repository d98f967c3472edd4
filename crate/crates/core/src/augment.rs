//! Paired image/mask augmentation: Gaussian blur, random affine, colour
//! jitter and flips, applied in that order.
//!
//! Every random draw comes from the caller's generator, so a seeded
//! generator reproduces the exact same output.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::raster::RgbF32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
    /// Maximum translation as a fraction of width and height.
    pub max_translate: f64,
    pub max_rotate_deg: f64,
    pub scale: [f64; 2],
    pub max_shear_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            blur_kernel: 25,
            blur_sigma: [0.001, 2.0],
            max_translate: 0.125,
            max_rotate_deg: 180.0,
            scale: [0.5, 1.5],
            max_shear_deg: 22.5,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            brightness: 0.25,
            contrast: 0.25,
            saturation: 0.25,
            hue: 0.05,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose every step is the identity.
    pub fn identity() -> Self {
        Self {
            enabled: true,
            blur_kernel: 1,
            blur_sigma: [1.0, 1.0],
            max_translate: 0.0,
            max_rotate_deg: 0.0,
            scale: [1.0, 1.0],
            max_shear_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return fail("blur_kernel must be odd and positive");
        }
        let [s0, s1] = self.blur_sigma;
        if !(s0 > 0.0 && s0 <= s1) {
            return fail("blur_sigma must be positive with low <= high");
        }
        let [c0, c1] = self.scale;
        if !(c0 > 0.0 && c0 <= c1) {
            return fail("scale must be positive with low <= high");
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.max_translate) {
            return fail("max_translate must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return fail("hue must lie in [0, 0.5]");
        }
        for (name, v) in [
            ("max_rotate_deg", self.max_rotate_deg),
            ("max_shear_deg", self.max_shear_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Normalized 1-D Gaussian taps centred on the middle of the kernel.
pub fn gaussian_kernel(kernel: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("blur kernel {kernel} must be odd and positive")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma {sigma} must be positive")));
    }
    let half = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel).map(|i| (-0.5 * ((i as f64 - half) / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &RgbF32, kernel: usize, sigma: f64) -> Result<RgbF32> {
    let taps = gaussian_kernel(kernel, sigma)?;
    if kernel == 1 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let half = (kernel / 2) as isize;
    let src = img.as_slice();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (k, t) in taps.iter().enumerate() {
                let sx = reflect(x as isize + k as isize - half, w);
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += t * src[i + c] as f64;
                }
            }
            let o = (y * w + x) * 3;
            for c in 0..3 {
                tmp[o + c] = acc[c] as f32;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (k, t) in taps.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - half, h);
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += t * tmp[i + c] as f64;
                }
            }
            let o = (y * w + x) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] as f32;
            }
        }
    }
    RgbF32::new(w, h, out)
}

/// Affine parameters about the image centre. Translation is in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self { angle_deg: 0.0, translate: (0.0, 0.0), scale: 1.0, shear_deg: 0.0 };

    /// Angle and shear uniform in their symmetric ranges, translation
    /// rounded to whole pixels, scale uniform in its range.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let angle_deg = uniform(rng, -cfg.max_rotate_deg, cfg.max_rotate_deg);
        let tx = uniform(rng, -cfg.max_translate * width as f64, cfg.max_translate * width as f64).round();
        let ty = uniform(rng, -cfg.max_translate * height as f64, cfg.max_translate * height as f64).round();
        let scale = uniform(rng, cfg.scale[0], cfg.scale[1]);
        let shear_deg = uniform(rng, -cfg.max_shear_deg, cfg.max_shear_deg);
        Self { angle_deg, translate: (tx, ty), scale, shear_deg }
    }

    /// Forward linear part: rotation composed with horizontal shear and
    /// isotropic scale.
    fn linear(&self) -> [f64; 4] {
        let r = self.angle_deg.to_radians();
        let sx = self.shear_deg.to_radians();
        let (s, c) = r.sin_cos();
        let t = sx.tan();
        [c * self.scale, (-c * t - s) * self.scale, s * self.scale, (-s * t + c) * self.scale]
    }

    /// Maps each output pixel to its source coordinate.
    fn inverse_mapper(&self, width: usize, height: usize) -> impl Fn(usize, usize) -> (f64, f64) {
        let [a, b, c, d] = self.linear();
        let det = a * d - b * c;
        let inv = [d / det, -b / det, -c / det, a / det];
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (tx, ty) = self.translate;
        move |x, y| {
            let (px, py) = (x as f64 - cx - tx, y as f64 - cy - ty);
            (inv[0] * px + inv[1] * py + cx, inv[2] * px + inv[3] * py + cy)
        }
    }
}

fn inside(v: f64, n: usize) -> bool {
    v >= -0.5 && v < n as f64 - 0.5
}

/// Image sampled bilinearly, mask by nearest neighbour, both zero outside
/// the source frame.
pub fn affine_pair(img: &RgbF32, mask: &Mask, params: &AffineParams) -> Result<(RgbF32, Mask)> {
    let (w, h) = (img.width(), img.height());
    if mask.width() != w || mask.height() != h {
        return Err(Error::Contract(format!(
            "image is {w}x{h} but mask is {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    if *params == AffineParams::IDENTITY {
        return Ok((img.clone(), mask.clone()));
    }
    let map = params.inverse_mapper(w, h);
    let out = RgbF32::from_fn(w, h, |x, y| {
        let (sx, sy) = map(x, y);
        if !inside(sx, w) || !inside(sy, h) {
            return [0.0; 3];
        }
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        let (p00, p10, p01, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        std::array::from_fn(|k| {
            let top = p00[k] + (p10[k] - p00[k]) * fx;
            let bot = p01[k] + (p11[k] - p01[k]) * fx;
            top + (bot - top) * fy
        })
    });
    let out_mask = Mask::from_fn(w, h, |x, y| {
        let (sx, sy) = map(x, y);
        if !inside(sx, w) || !inside(sy, h) {
            return false;
        }
        let nx = ((sx + 0.5).floor() as usize).min(w - 1);
        let ny = ((sy + 0.5).floor() as usize).min(h - 1);
        mask.get(nx, ny) == 1
    });
    Ok((out, out_mask))
}

pub fn random_affine_pair<R: Rng + ?Sized>(
    img: &RgbF32,
    mask: &Mask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(RgbF32, Mask)> {
    let params = AffineParams::sample(cfg, img.width(), img.height(), rng);
    affine_pair(img, mask, &params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Concrete jitter factors and the order in which they apply.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [JitterOp; 4],
}

impl JitterParams {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
    };

    /// Multiplicative factors uniform in `[max(0, 1 - s), 1 + s]`, hue shift
    /// uniform in `[-s, s]`, order a random permutation.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut order = Self::IDENTITY.order;
        order.shuffle(rng);
        let factor = |rng: &mut R, s: f64| uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
        let brightness = factor(rng, cfg.brightness);
        let contrast = factor(rng, cfg.contrast);
        let saturation = factor(rng, cfg.saturation);
        let hue = uniform(rng, -cfg.hue, cfg.hue);
        Self { brightness, contrast, saturation, hue, order }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(img: &mut RgbF32, factor: f32, other: impl Fn([f32; 3]) -> [f32; 3]) {
    for px in img.as_mut_slice().chunks_exact_mut(3) {
        let o = other([px[0], px[1], px[2]]);
        for c in 0..3 {
            px[c] = (factor * px[c] + (1.0 - factor) * o[c]).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Applies brightness, contrast, saturation and hue adjustments in
/// `params.order`, clamping to `[0, 1]` after each one.
pub fn apply_jitter(img: &RgbF32, params: &JitterParams) -> RgbF32 {
    let mut out = img.clone();
    for op in params.order {
        match op {
            JitterOp::Brightness if params.brightness != 1.0 => blend(&mut out, params.brightness as f32, |_| [0.0; 3]),
            JitterOp::Contrast if params.contrast != 1.0 => {
                let n = (out.width() * out.height()).max(1) as f64;
                let mean = out.as_slice().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]]) as f64).sum::<f64>() / n;
                blend(&mut out, params.contrast as f32, |_| [mean as f32; 3]);
            }
            JitterOp::Saturation if params.saturation != 1.0 => {
                blend(&mut out, params.saturation as f32, |p| [luma(p); 3])
            }
            JitterOp::Hue if params.hue != 0.0 => {
                for px in out.as_mut_slice().chunks_exact_mut(3) {
                    let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
                    let rgb = hsv_to_rgb([h + params.hue as f32, s, v]);
                    px.copy_from_slice(&rgb.map(|c| c.clamp(0.0, 1.0)));
                }
            }
            _ => {}
        }
    }
    out
}

pub fn color_jitter<R: Rng + ?Sized>(img: &RgbF32, cfg: &AugmentConfig, rng: &mut R) -> RgbF32 {
    apply_jitter(img, &JitterParams::sample(cfg, rng))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    /// Draws the horizontal decision first, then the vertical one.
    pub fn sample<R: Rng + ?Sized>(h_prob: f64, v_prob: f64, rng: &mut R) -> Self {
        let horizontal = rng.random::<f64>() < h_prob;
        let vertical = rng.random::<f64>() < v_prob;
        Self { horizontal, vertical }
    }
}

pub fn flip_pair(img: &RgbF32, mask: &Mask, flips: Flips) -> (RgbF32, Mask) {
    if flips == Flips::default() {
        return (img.clone(), mask.clone());
    }
    let (w, h) = (img.width(), img.height());
    let src = |x: usize, y: usize| {
        (if flips.horizontal { w - 1 - x } else { x }, if flips.vertical { h - 1 - y } else { y })
    };
    let out = RgbF32::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        img.pixel(sx, sy)
    });
    let out_mask = Mask::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        mask.get(sx, sy) == 1
    });
    (out, out_mask)
}

pub fn random_flips_pair<R: Rng + ?Sized>(
    img: &RgbF32,
    mask: &Mask,
    h_prob: f64,
    v_prob: f64,
    rng: &mut R,
) -> (RgbF32, Mask, Flips) {
    let flips = Flips::sample(h_prob, v_prob, rng);
    let (i, m) = flip_pair(img, mask, flips);
    (i, m, flips)
}

/// Blur, affine, jitter and flips. Returns the inputs unchanged when the
/// configuration is disabled.
pub fn augment_pair<R: Rng + ?Sized>(
    img: &RgbF32,
    mask: &Mask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(RgbF32, Mask)> {
    cfg.validate()?;
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::Contract(format!(
            "image is {}x{} but mask is {}x{}",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    if !cfg.enabled {
        return Ok((img.clone(), mask.clone()));
    }
    let sigma = uniform(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
    let blurred = gaussian_blur(img, cfg.blur_kernel, sigma)?;
    let (img, mask) = random_affine_pair(&blurred, mask, cfg, rng)?;
    let img = color_jitter(&img, cfg, rng);
    let (img, mask, _) = random_flips_pair(&img, &mask, cfg.hflip_prob, cfg.vflip_prob, rng);
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_does_not_repeat_edges() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let img = RgbF32::filled(4, 4, [0.5; 3]);
        assert!(matches!(gaussian_blur(&img, 24, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.2, 0.4, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for c in 0..3 {
                assert!((back[c] - p[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn brightness_scales_and_clamps() {
        let p = JitterParams { brightness: 1.5, ..JitterParams::IDENTITY };
        let out = apply_jitter(&RgbF32::filled(3, 3, [0.4; 3]), &p);
        assert!(out.as_slice().iter().all(|v| (v - 0.6).abs() < 1e-6));
        let out = apply_jitter(&RgbF32::filled(3, 3, [0.8; 3]), &p);
        assert!(out.as_slice().iter().all(|&v| v == 1.0));
    }
}
