use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aatu::UNetConfig;
use crate::audio2lm::LossWeights;
use crate::{Error, Result};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "EMOTALK_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Audio to landmarks.
    Landmarks,
    /// Sketch plus reference to frame.
    Render,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "landmarks" => Ok(Stage::Landmarks),
            "render" => Ok(Stage::Render),
            other => Err(Error::InvalidInput(format!("unknown stage {other:?}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Landmarks => "landmarks",
            Stage::Render => "render",
        })
    }
}

/// Training configuration. Every key is optional in the JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub pca_k: usize,
    pub n_mfcc: usize,
    pub unet: UNetConfig,
    /// Render stage: sketches from ground-truth landmarks instead of stage-one predictions.
    pub teacher_forcing: bool,
    /// Perceptual extractor weights (JSON tensor records); a fixed seeded
    /// extractor is used when absent.
    pub perceptual_weights: Option<PathBuf>,
    /// Extractor layers summed by the perceptual loss; all when absent.
    pub perceptual_layers: Option<Vec<usize>>,
    /// Uses only the first N training videos.
    pub max_videos: Option<usize>,
    /// Render stage: keep every n-th frame of each video.
    pub frame_stride: usize,
    /// Render stage: cap on the number of training pairs.
    pub max_pairs: Option<usize>,
    /// Load videos on worker threads. Sample order is unaffected.
    pub parallel_loading: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Landmarks,
            lr: 1e-4,
            lr_decay: 0.95,
            batch_size: 16,
            epochs: 20,
            max_steps: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            pca_k: 20,
            n_mfcc: 13,
            unet: UNetConfig::default(),
            teacher_forcing: true,
            perceptual_weights: None,
            perceptual_layers: None,
            max_videos: None,
            frame_stride: 1,
            max_pairs: None,
            parallel_loading: false,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.frame_stride == 0 {
            return Err(Error::InvalidInput(
                "batch_size, epochs and frame_stride must be positive".into(),
            ));
        }
        if self.pca_k == 0 || self.n_mfcc == 0 {
            return Err(Error::InvalidInput("pca_k and n_mfcc must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.unet.validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `EMOTALK_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}
