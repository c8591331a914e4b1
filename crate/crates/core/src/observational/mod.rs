//! First stage: observational outcome flow and propensity model.

pub mod propensity;
pub mod stage1;

use serde::{Deserialize, Serialize};

use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Held out for reporting only; never used for stopping.
    pub val_frac: f64,
    /// Cosine-anneal the learning rate down to this fraction of
    /// `adam.lr` by the last epoch; 1 keeps it constant.
    pub lr_final_frac: f64,
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let frac = if self.epochs > 1 {
            epoch as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        let lo = self.adam.lr * self.lr_final_frac;
        lo + 0.5 * (self.adam.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            val_frac: 0.1,
            lr_final_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Set when training stopped on a non-finite loss; parameters are the
    /// last finite ones.
    pub diverged: Option<String>,
}

pub use propensity::{fit_propensity, Propensity, PropensityConfig, PropensityModel};
pub use stage1::{fit_stage1, Stage1Config, Stage1Model};
