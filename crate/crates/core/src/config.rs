//! Declarative model configuration, mirrored 1:1 by the JSON config file
//! (unknown keys rejected).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, LossWeights};
use crate::neck::NeckConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr0: f64,
    pub lr_final: f64,
    /// Passes over the dataset; with a dataset no larger than the batch this
    /// is exactly the optimizer step count.
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup over the first steps, scaling the cosine
    /// schedule; stabilizes the large early classification gradients.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            lr0: 0.02,
            lr_final: 0.0002,
            epochs: 200,
            momentum: 0.937,
            weight_decay: 0.0005,
            warmup_steps: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.neck.validate()?;
        self.loss.validate()?;
        if self.train.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        if self.train.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.train.lr0.is_finite() && self.train.lr_final.is_finite()) {
            return Err(Error::config("learning rates must be finite"));
        }
        if self.train.lr_final > self.train.lr0 {
            return Err(Error::config(format!(
                "lr_final {} must not exceed lr0 {}",
                self.train.lr_final, self.train.lr0
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializable")
    }
}
