use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Pixel confusion counts for the foreground class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::Contract(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (1, 1) => self.tp += 1,
                (1, _) => self.fp += 1,
                (_, 1) => self.fn_ += 1,
                _ => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_counts(*self)
    }
}

/// Micro-averaged foreground metrics.
///
/// A ratio whose denominator is zero evaluates to 1 when the split has no
/// foreground in either prediction or ground truth, and to 0 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub dsc: f64,
    pub prc: f64,
    pub rec: f64,
}

impl MetricsReport {
    pub fn from_counts(c: Counts) -> Self {
        let empty = c.tp + c.fp + c.fn_ == 0;
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                if empty { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            }
        };
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            prc: ratio(c.tp, c.tp + c.fp),
            rec: ratio(c.tp, c.tp + c.fn_),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_, tn: self.tn }
    }
}

/// Accumulates counts over every image before forming ratios.
pub fn compute_micro_metrics(preds: &[Mask], gts: &[Mask]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::EmptySplit);
    }
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!("{} predictions for {} ground-truth masks", preds.len(), gts.len())));
    }
    let mut c = Counts::default();
    for (p, g) in preds.iter().zip(gts) {
        c.accumulate(p, g)?;
    }
    Ok(c.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_split_is_an_error() {
        assert!(matches!(compute_micro_metrics(&[], &[]), Err(Error::EmptySplit)));
    }

    #[test]
    fn all_background_is_perfect() {
        let m = Mask::zeros(3, 3);
        let r = compute_micro_metrics(&[m.clone()], &[m]).unwrap();
        assert_eq!((r.iou, r.dsc, r.prc, r.rec), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.tn, 9);
    }

    #[test]
    fn missed_foreground_scores_zero() {
        let gt = Mask::from_fn(2, 2, |x, _| x == 0);
        let r = compute_micro_metrics(&[Mask::zeros(2, 2)], &[gt]).unwrap();
        assert_eq!((r.iou, r.dsc, r.prc, r.rec), (0.0, 0.0, 0.0, 0.0));
    }
}
