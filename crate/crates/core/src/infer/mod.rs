//! Deployment path: centre crop, thresholded prediction, run-length
//! encoded masks and the latest-wins stream worker.

mod mailbox;
pub mod protocol;
pub mod rle;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_rgb, read_rgb};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::models::{Mode, Network};
use crate::raster::{to_normalized_tensor, RgbF32};
use crate::train::masks_from_logits;

pub use mailbox::LatestWins;
pub use protocol::{FramePacket, MaskPacket};
pub use rle::{decode_rle, encode_rle};

pub const CROP: usize = 224;
pub const DEPLOY_THRESHOLD: f64 = 0.75;

pub fn validate_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {t} must lie strictly between 0 and 1")))
    }
}

/// Top-left corner of the centred crop, rounding offsets down.
pub fn crop_origin(width: usize, height: usize) -> (usize, usize) {
    ((width.saturating_sub(CROP)) / 2, (height.saturating_sub(CROP)) / 2)
}

/// The 224x224 window the network sees, and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CroppedFrame {
    pub image: RgbF32,
    /// Crop origin in the (possibly upscaled) frame.
    pub origin: (usize, usize),
    /// Size the frame was upscaled to when a side was under 224 pixels.
    pub upscaled: Option<(usize, usize)>,
}

/// Upscales frames with a side under 224 so the short side becomes 224,
/// keeping the aspect ratio, then takes the centred 224x224 window.
pub fn center_crop(frame: &RgbF32) -> Result<CroppedFrame> {
    let (w, h) = (frame.width(), frame.height());
    if w == 0 || h == 0 {
        return Err(Error::Contract("frame has zero size".into()));
    }
    let (src, upscaled) = if w < CROP || h < CROP {
        let scale = CROP as f64 / w.min(h) as f64;
        let (nw, nh) = if w <= h {
            (CROP, ((h as f64 * scale).round() as usize).max(CROP))
        } else {
            (((w as f64 * scale).round() as usize).max(CROP), CROP)
        };
        log::info!("upscaling {w}x{h} frame to {nw}x{nh} before cropping");
        (std::borrow::Cow::Owned(frame.resize_bilinear(nw, nh)), Some((nw, nh)))
    } else {
        (std::borrow::Cow::Borrowed(frame), None)
    };
    let origin = crop_origin(src.width(), src.height());
    Ok(CroppedFrame { image: src.crop(origin.0, origin.1, CROP, CROP)?, origin, upscaled })
}

/// Centre crop and normalization into a `(1, 3, 224, 224)` tensor.
pub fn preprocess_frame(frame: &RgbF32) -> Result<Tensor> {
    to_normalized_tensor(&[&center_crop(frame)?.image])
}

/// `sigmoid(logits) >= threshold` for a single preprocessed frame.
pub fn predict_mask(net: &Network, input: &Tensor, threshold: f64) -> Result<Mask> {
    if net.mode() != Mode::Eval {
        return Err(Error::Contract("prediction requires a network in eval mode".into()));
    }
    let logits = net.forward(input).map_err(|e| Error::Inference {
        variant: net.variant().name().into(),
        reason: e.to_string(),
    })?;
    let mut masks = masks_from_logits(&logits, threshold, net.variant().name())?;
    masks.truncate(1);
    masks.pop().ok_or_else(|| Error::Shape("empty prediction batch".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub inference_ms: f32,
    pub origin: (usize, usize),
}

/// A shared eval-mode network with a deployment threshold.
#[derive(Clone, Debug)]
pub struct Segmenter {
    net: Arc<Network>,
    threshold: f64,
}

impl Segmenter {
    pub fn new(mut net: Network, threshold: f64) -> Result<Self> {
        validate_threshold(threshold)?;
        net.set_mode(Mode::Eval);
        Ok(Self { net: Arc::new(net), threshold })
    }

    pub fn from_shared(net: Arc<Network>, threshold: f64) -> Result<Self> {
        validate_threshold(threshold)?;
        if net.mode() != Mode::Eval {
            return Err(Error::Contract("shared networks must be in eval mode".into()));
        }
        Ok(Self { net, threshold })
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.net
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        Self::from_shared(self.net.clone(), threshold)
    }

    pub fn segment(&self, frame: &RgbF32) -> Result<Segmentation> {
        let start = Instant::now();
        let crop = center_crop(frame)?;
        let input = to_normalized_tensor(&[&crop.image])?;
        let mask = predict_mask(&self.net, &input, self.threshold)?;
        Ok(Segmentation { mask, inference_ms: start.elapsed().as_secs_f32() * 1e3, origin: crop.origin })
    }

    /// Decodes an encoded image (PNG or JPEG) and segments it.
    pub fn segment_encoded(&self, bytes: &[u8]) -> Result<Segmentation> {
        let img = decode_rgb(Path::new("<frame>"), bytes)?;
        self.segment(&RgbF32::from_rgb8(&img))
    }
}

/// Runs `handle` on each frame taken from `mailbox` on a dedicated thread
/// until the mailbox is closed and drained.
pub fn spawn_stream_worker<T, F>(mailbox: Arc<LatestWins<T>>, mut handle: F) -> JoinHandle<()>
where
    T: Send + 'static,
    F: FnMut(T) + Send + 'static,
{
    std::thread::spawn(move || {
        while let Some(item) = mailbox.take() {
            handle(item);
        }
    })
}

/// One metadata line written next to each mask file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub variant: String,
    pub threshold: f64,
    pub inference_ms: f32,
    pub foreground_pixels: usize,
}

/// `<stem>.mask.png` next to the input.
pub fn default_mask_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    image.with_file_name(format!("{stem}.mask.png"))
}

/// Segments one image file and writes the 0/255 mask plus a `.json`
/// metadata line beside it.
pub fn infer_file(seg: &Segmenter, image: &Path, output: &Path) -> Result<InferRecord> {
    let img = read_rgb(image)?;
    let s = seg.segment(&RgbF32::from_rgb8(&img))?;
    s.mask.to_gray_image().save(output).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(output, io),
        other => Error::CorruptInput { path: output.into(), reason: other.to_string() },
    })?;
    let record = InferRecord {
        image: image.into(),
        mask: output.into(),
        variant: seg.network().variant().name().into(),
        threshold: seg.threshold(),
        inference_ms: s.inference_ms,
        foreground_pixels: s.mask.count_ones(),
    };
    let meta = output.with_extension("json");
    let line = serde_json::to_string(&record).map_err(|e| Error::Consistency(e.to_string()))? + "\n";
    std::fs::write(&meta, line).map_err(|e| Error::io(&meta, e))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_offsets_round_down() {
        assert_eq!(crop_origin(640, 480), (208, 128));
        assert_eq!(crop_origin(224, 224), (0, 0));
        assert_eq!(crop_origin(225, 224), (0, 0));
        assert_eq!(crop_origin(227, 230), (1, 3));
    }

    #[test]
    fn small_frames_are_upscaled_not_padded() {
        let frame = RgbF32::from_fn(112, 200, |x, y| [x as f32 / 112.0, y as f32 / 200.0, 0.5]);
        let c = center_crop(&frame).unwrap();
        assert_eq!(c.upscaled, Some((224, 400)));
        assert_eq!(c.origin, (0, 88));
        assert_eq!((c.image.width(), c.image.height()), (CROP, CROP));
    }

    #[test]
    fn exact_size_is_identity() {
        let frame = RgbF32::from_fn(CROP, CROP, |x, y| [(x * y % 7) as f32 / 7.0; 3]);
        assert_eq!(center_crop(&frame).unwrap().image, frame);
    }
}
