//! Run configuration, read from TOML. Every section and field is optional;
//! missing values take their defaults.
//!
//! ```toml
//! [model]
//! layers = 2
//! dim = 64
//! heads = 4
//!
//! [train]
//! lr = 3e-5
//! batch = 2
//! grad_accum = 4
//! epochs = 5
//! seed = 0
//! schedule = "constant"   # or "linear"
//!
//! [decode]
//! max_new = 32
//! copy_budget_ratio = 0.6
//! max_copies_per_patch = 2
//! policy = { kind = "argmax" }   # or { kind = "sample", temperature = 1.0, seed = 0 }
//!
//! [zloss]
//! k = 40
//! lambda = 1e-5
//!
//! [data]
//! rows = 4
//! cols = 4
//!
//! [contrast]
//! layers = []              # empty: middle layer
//! crop_ratios = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
//!
//! [paths]
//! metrics = "metrics.jsonl"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pointcopy::analysis::ContrastConfig;
use pointcopy::data::SynthConfig;
use pointcopy::decode::DecodeConfig;
use pointcopy::train::TrainConfig;
use pointcopy::{ModelConfig, ZLossConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training metrics log (line-delimited JSON).
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub zloss: ZLossConfig,
    pub data: SynthConfig,
    pub contrast: ContrastConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.zloss.k == 0 || !(self.zloss.lambda >= 0.0) {
            bail!("zloss.k must be positive and zloss.lambda non-negative");
        }
        if !(self.data.noise_sigma >= 0.0) || self.data.patch_px == 0 {
            bail!("data.noise_sigma must be non-negative and data.patch_px positive");
        }
        Ok(())
    }
}
