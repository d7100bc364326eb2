//! Run configuration: every tunable, sectioned TOML, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bfm::BfmConfig;
use crate::clse::ClseConfig;
use crate::data::BlurPolicy;
use crate::denoiser::DenoiserConfig;
use crate::engine::{ModelConfig, SamplerConfig, DEFAULT_LR};
use crate::error::{Error, Result};
use crate::schedule::{default_beta_range, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Defaults to the reference range stretched to `steps`.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            beta_min: None,
            beta_max: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let (lo, hi) = default_beta_range(self.steps);
        NoiseSchedule::linear(self.steps, self.beta_min.unwrap_or(lo), self.beta_max.unwrap_or(hi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub scale: usize,
    /// See [`BlurPolicy::parse`].
    pub blur_policy: String,
    pub seed: u64,
    /// Clear/blurred pairs for clarity pretraining.
    pub clarity_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 256,
            scale: 4,
            blur_policy: "mixed".into(),
            seed: 0,
            clarity_pairs: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Linear ramp over the first steps.
    pub warmup_steps: u64,
    pub lr_decay: LrDecay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` to 0 over the run.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            batch: 8,
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            warmup_steps: 0,
            lr_decay: LrDecay::Constant,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update after `done` completed steps of a
    /// `total`-step run.
    pub fn lr_at(&self, done: u64, total: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((done + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.lr_decay {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * done.min(total) as f64 / total.max(1) as f64).cos()),
        };
        self.lr * warm * decay
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub clse_ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub clse: ClseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Named presets: `desk` (the default), `small` and `smoke`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "small" => Ok(Self::small()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk, small, smoke)"))),
        }
    }

    /// A model that trains in tens of minutes on one CPU core.
    pub fn small() -> Self {
        let mut c = Self::default();
        c.schedule.steps = 1000;
        c.clse.sem_dim = 64;
        c.model = ModelConfig {
            hr_size: 64,
            sem_dim: 64,
            bfm: BfmConfig {
                patch: 2,
                dim: 32,
                depth: 2,
                state: 8,
                conv_kernel: 3,
                feat_channels: 16,
            },
            denoiser: DenoiserConfig {
                widths: vec![16, 32, 64],
                res_blocks: 1,
                groups: 8,
                gamma_embed_dim: 32,
                sem_tokens: 4,
                attn_dim: 32,
            },
        };
        c.train.lr = 2e-3;
        c.train.steps = 1500;
        c.train.warmup_steps = 50;
        c.train.lr_decay = LrDecay::Cosine;
        c.sample.steps = 100;
        c
    }

    /// Seconds-scale settings for tests and pipeline checks.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.schedule.steps = 200;
        c.data.scenes = 8;
        c.data.scale = 2;
        c.data.clarity_pairs = 16;
        c.clse = ClseConfig {
            channels: vec![4, 8],
            sem_dim: 8,
            epochs: 1,
            batch: 8,
            ..ClseConfig::default()
        };
        c.model = ModelConfig {
            hr_size: 16,
            sem_dim: 8,
            bfm: BfmConfig {
                patch: 4,
                dim: 8,
                depth: 1,
                state: 4,
                conv_kernel: 3,
                feat_channels: 4,
            },
            denoiser: DenoiserConfig {
                widths: vec![4, 8],
                res_blocks: 1,
                groups: 2,
                gamma_embed_dim: 8,
                sem_tokens: 2,
                attn_dim: 4,
            },
        };
        c.train.batch = 2;
        c.train.steps = 4;
        c.train.lr = 1e-3;
        c.train.checkpoint_every = 2;
        c.sample.steps = 50;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.clse.validate()?;
        BlurPolicy::parse(&self.data.blur_policy)?;
        if self.model.sem_dim != self.clse.sem_dim {
            return Err(Error::Config(format!(
                "model.sem_dim {} differs from clse.sem_dim {}",
                self.model.sem_dim, self.clse.sem_dim
            )));
        }
        crate::engine::FusionNet::new(self.model.clone())?;
        if self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train.batch and train.lr must be positive".into()));
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sample.steps {} must lie in 1..={}",
                self.sample.steps, self.schedule.steps
            )));
        }
        if self.model.hr_size % self.data.scale != 0 {
            return Err(Error::Config(format!(
                "hr_size {} not divisible by scale {}",
                self.model.hr_size, self.data.scale
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config not representable as TOML: {e}")))
    }

    /// Errors when `other` disagrees on anything that fixes parameter
    /// shapes or the training noise process.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<()> {
        let clse_arch = |c: &ClseConfig| (c.channels.clone(), c.sem_dim);
        if self.model != other.model || self.schedule != other.schedule || clse_arch(&self.clse) != clse_arch(&other.clse) {
            return Err(Error::Config(
                "configuration conflicts with the checkpoint's architecture or schedule".into(),
            ));
        }
        Ok(())
    }
}
