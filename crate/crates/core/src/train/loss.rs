use candle_core::Tensor;

use crate::error::{Error, Result};

/// Mean binary cross entropy on logits in the form
/// `max(z, 0) - z t + ln(1 + exp(-|z|))`, which never overflows.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Contract(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dims(),
            targets.dims()
        )));
    }
    let targets = targets.to_dtype(logits.dtype())?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_pixel = ((logits.relu()? - (logits * targets)?)? + softplus)?;
    Ok(per_pixel.mean_all()?)
}

/// Scalar form of [`bce_with_logits`] for a single pixel.
pub fn bce_scalar(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}
