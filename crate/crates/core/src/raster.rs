//! Floating-point RGB images and conversion to normalized network input.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Interleaved RGB with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbF32 {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbF32 {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Contract(format!(
                "image data has {} values, expected {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    /// Rounds and clamps to 8-bit channels.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let px = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, px).expect("dimensions match")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Contract(format!(
                "crop {width}x{height} at ({x0}, {y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Bilinear resize with half-pixel centres and clamped borders.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let axis = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (s.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = axis(width, self.width);
        let ys = axis(height, self.height);
        Self::from_fn(width, height, |x, y| {
            let (x0, x1, fx) = xs[x];
            let (y0, y1, fy) = ys[y];
            let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
            std::array::from_fn(|k| {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bot = c[k] + (d[k] - c[k]) * fx;
                top + (bot - top) * fy
            })
        })
    }
}

/// Stacks equally sized images into a normalized `(N, 3, H, W)` f32 tensor.
pub fn to_normalized_tensor(images: &[&RgbF32]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut out = vec![0f32; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(Error::Contract(format!(
                "batch mixes {}x{} with {w}x{h}",
                img.width, img.height
            )));
        }
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[(n * 3 + c) * plane + p] = (px[c] - NORM_MEAN[c]) / NORM_STD[c];
            }
        }
    }
    Ok(Tensor::from_vec(out, (images.len(), 3, h, w), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_constants_are_applied_per_channel() {
        let img = RgbF32::filled(2, 1, [0.485, 0.456 + 0.224, 0.406 - 2.0 * 0.225]);
        let t = to_normalized_tensor(&[&img]).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let expect = [0.0, 0.0, 1.0, 1.0, -2.0, -2.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{v:?}");
        }
    }

    #[test]
    fn bilinear_upscale_interpolates_between_columns() {
        let img = RgbF32::from_fn(2, 1, |x, _| [x as f32; 3]);
        let up = img.resize_bilinear(4, 1);
        let row: Vec<f32> = (0..4).map(|x| up.pixel(x, 0)[0]).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
