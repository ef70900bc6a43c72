use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-5,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// gone `patience` epochs without improving, never going below `min_lr`.
#[derive(Clone, Debug)]
pub struct ReduceLrOnPlateau {
    pub cfg: PlateauConfig,
    best: f64,
    wait: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(cfg: PlateauConfig) -> Result<Self> {
        if !(cfg.factor > 0.0 && cfg.factor < 1.0) || cfg.patience == 0 || !(cfg.min_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad plateau settings: factor {}, patience {}, min_lr {}",
                cfg.factor, cfg.patience, cfg.min_lr
            )));
        }
        Ok(ReduceLrOnPlateau {
            cfg,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Feeds one epoch's loss and returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.cfg.patience {
            self.wait = 0;
            return (lr * self.cfg.factor).max(self.cfg.min_lr);
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopVerdict {
    pub improved: bool,
    pub stop: bool,
}

/// Signals a stop after `patience` epochs without improvement; the caller
/// restores the weights from the best epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::InvalidArgument("early-stopping patience must be at least 1".into()));
        }
        Ok(EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        })
    }

    pub fn update(&mut self, loss: f64, epoch: usize) -> StopVerdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopVerdict {
                improved: true,
                stop: false,
            };
        }
        self.wait += 1;
        StopVerdict {
            improved: false,
            stop: self.wait >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}
