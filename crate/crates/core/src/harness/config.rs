use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::NoiseModel;
use crate::network::ModelConfig;
use crate::optim::{AdamConfig, CosineSchedule};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "EVMAMBA_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Sum of random Gaussian blobs through a sigmoid.
    #[default]
    Smooth,
    /// Two-level straight edge.
    StepEdge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic pairs.
    pub pairs: usize,
    /// Side length of the square synthetic images.
    pub size: usize,
    /// Sharp frames averaged into one blurry image.
    pub frames: usize,
    /// Translation speed in pixels per frame.
    pub motion: f64,
    /// Contrast threshold of the event simulator.
    pub threshold: f64,
    pub frame_interval_us: u64,
    pub pattern: Pattern,
    /// Spurious events per pixel.
    pub noise_rate: f64,
    /// Fraction of hot pixels.
    pub hot_rate: f64,
    pub hot_fires: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 4,
            size: 32,
            frames: 7,
            motion: 1.5,
            threshold: 0.2,
            frame_interval_us: 1000,
            pattern: Pattern::Smooth,
            noise_rate: 0.05,
            hot_rate: 0.002,
            hot_fires: 8,
        }
    }
}

impl DataConfig {
    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel { noise_rate: self.noise_rate, hot_rate: self.hot_rate, hot_fires: self.hot_fires }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub initial_lr: f64,
    pub min_lr: f64,
    /// Length of the cosine schedule; the number of training steps when unset.
    pub schedule_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        let s = CosineSchedule::default();
        Self { initial_lr: s.initial, min_lr: s.minimum, schedule_steps: None, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per step; the whole set when larger than it.
    pub batch_size: usize,
    /// Square training crop; the full image when equal to the data size.
    pub crop: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Log loss and PSNR every this many steps (0 disables).
    pub log_every: usize,
    /// Emit an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 4, crop: 32, hflip: true, vflip: true, log_every: 10, checkpoint_every: 0 }
    }
}

/// Everything a run depends on. Paths may also come from the command line,
/// which takes precedence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies [`SEED_ENV`] when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if d.pairs == 0 || d.size == 0 {
            return Err(Error::Config("data.pairs and data.size must be positive".into()));
        }
        if d.frames < 2 {
            return Err(Error::Config(format!("data.frames must be at least 2, got {}", d.frames)));
        }
        if !(d.threshold > 0.0) || !(d.motion >= 0.0) || d.frame_interval_us == 0 {
            return Err(Error::Config(
                "data.threshold and data.frame_interval_us must be positive, data.motion non-negative".into(),
            ));
        }
        if !(d.noise_rate >= 0.0) || !(d.hot_rate >= 0.0) {
            return Err(Error::Config("noise rates must be non-negative".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if t.crop == 0 || t.crop > d.size {
            return Err(Error::Config(format!("train.crop {} must be in 1..={}", t.crop, d.size)));
        }
        self.model.check_resolution(t.crop, t.crop).map_err(|e| Error::Config(format!("train.crop: {e}")))?;
        let o = &self.optim;
        if !(o.initial_lr > 0.0) || !(o.min_lr >= 0.0) || o.min_lr > o.initial_lr {
            return Err(Error::Config("need 0 <= optim.min_lr <= optim.initial_lr and initial_lr > 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            initial: self.optim.initial_lr,
            minimum: self.optim.min_lr,
            total_steps: self.optim.schedule_steps.unwrap_or(self.train.steps),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.optim.beta1, beta2: self.optim.beta2, eps: self.optim.eps }
    }
}

/// Mixes a run seed with a purpose tag and an index into an independent
/// stream seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z =
        seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
