// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training configuration, read from a TOML file.
//!
//! ```toml
//! seed = 1
//! head = "slcbm"            # or "baseline"
//! dataset = "data/shapes"   # optional; `--data` overrides
//! data_fraction = 1.0
//!
//! [optimizer]
//! learning_rate = 0.0003
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! batch_size = 2
//! epochs = 100
//!
//! [loss]
//! lambda_ce = 1.0
//! lambda_ca = 1e4
//! lambda_e = 5.0
//! lambda_c = 0.0
//! gamma = 1.0
//! tau = 0.07
//! entropy_reduction = "sum"  # or "mean"
//!
//! [backbone]
//! patch_size = 8
//! feature_dim = 64
//! seed = 0
//!
//! [eval]
//! nec_sizes = [5, 10, 15]
//! ```
//!
//! Every key is optional and falls back to the defaults shown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::BackboneConfig;
use crate::error::{ensure, Error, Result};
use crate::losses::LossWeights;
use crate::metrics::EvalConfig;
use crate::model::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub head: HeadKind,
    pub dataset: Option<PathBuf>,
    pub data_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub backbone: BackboneConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            head: HeadKind::Slcbm,
            dataset: None,
            data_fraction: 1.0,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            backbone: BackboneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        ensure!(
            o.learning_rate.is_finite() && o.learning_rate > 0.0,
            "learning_rate must be positive"
        );
        ensure!((0.0..1.0).contains(&o.beta1), "beta1 must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&o.beta2), "beta2 must lie in [0, 1)");
        ensure!(o.eps.is_finite() && o.eps > 0.0, "eps must be positive");
        ensure!(o.batch_size >= 1, "batch_size must be positive");
        ensure!(
            o.batch_size >= 2 || self.loss.lambda_c == 0.0,
            "batch_size must be at least 2 when lambda_c > 0"
        );
        ensure!(
            self.data_fraction > 0.0 && self.data_fraction <= 1.0,
            "data_fraction must lie in (0, 1], got {}",
            self.data_fraction
        );
        self.loss.validate()
    }
}
