use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Minimum absolute gain over the best value that counts as improvement.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.1, patience: 10, threshold: 1e-6, min_lr: 1e-6 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config("scheduler.factor must lie in (0, 1)".into()));
        }
        if !(self.min_lr > 0.0) || !(self.threshold >= 0.0) {
            return Err(Error::Config("scheduler.min_lr must be positive and threshold non-negative".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau state for a metric that should increase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub best_metric: Option<f64>,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
}

impl SchedulerState {
    pub fn new(lr: f64) -> Self {
        Self { best_metric: None, epochs_since_improvement: 0, current_lr: lr }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, cfg: &PlateauConfig) -> f64 {
        let improved = match self.best_metric {
            None => true,
            Some(best) => metric > best + cfg.threshold,
        };
        if improved {
            self.best_metric = Some(metric);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement > cfg.patience {
                self.current_lr = (self.current_lr * cfg.factor).max(cfg.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

/// Tracks the epoch with the highest validation IoU; the earliest wins ties.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `iou` is a new best.
    pub fn observe(&mut self, epoch: usize, iou: f64) -> bool {
        match self.best {
            Some((_, b)) if iou <= b => false,
            _ => {
                self.best = Some((epoch, iou));
                true
            }
        }
    }

    pub fn epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_epoch_resets_counter() {
        let cfg = PlateauConfig::default();
        let mut s = SchedulerState::new(1e-4);
        s.step(0.5, &cfg);
        s.step(0.4, &cfg);
        assert_eq!(s.epochs_since_improvement, 1);
        assert_eq!(s.step(0.6, &cfg), 1e-4);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn best_is_argmax() {
        let mut t = BestTracker::default();
        for (e, v) in [0.3, 0.5, 0.4].into_iter().enumerate() {
            t.observe(e + 1, v);
        }
        assert_eq!(t.epoch(), Some(2));
    }
}
