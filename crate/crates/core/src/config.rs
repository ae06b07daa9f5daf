//! The six-section JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Required for training; may be supplied on the command line instead.
    pub seed: Option<u64>,
    /// Write a numbered checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: u64,
    /// Std-dev of the Gaussian noise added to audio features during training.
    pub audio_noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            seed: None,
            checkpoint_every: 0,
            audio_noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub clips_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            clips_per_video: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("eval.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.clips_per_video == 0 {
            return Err(Error::Config("eval.batch_size, eval.epochs and eval.clips_per_video must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Parse and validate; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("invalid config at line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be at least 2 for contrastive training, got {}",
                self.train.batch_size
            )));
        }
        if !(self.train.audio_noise_sigma >= 0.0 && self.train.audio_noise_sigma.is_finite()) {
            return Err(Error::Config("train.audio_noise_sigma must be non-negative".into()));
        }
        let (d, m) = (&self.data, &self.model);
        if d.d_v_raw != m.d_v_raw || d.d_a_raw != m.d_a_raw {
            return Err(Error::Config(format!(
                "data feature widths (video {}, audio {}) differ from model inputs (video {}, audio {})",
                d.d_v_raw, d.d_a_raw, m.d_v_raw, m.d_a_raw
            )));
        }
        if d.vocab > m.vocab || d.l_text > m.max_text_len {
            return Err(Error::Config(format!(
                "data text (vocab {}, length {}) exceeds model limits (vocab {}, length {})",
                d.vocab, d.l_text, m.vocab, m.max_text_len
            )));
        }
        Ok(())
    }
}
