//! Run configuration: one TOML document with a section per pipeline stage.
//! Every field has a default and unknown keys are rejected. The top-level
//! seed and the `[schedule]` section are copied into the stages that need
//! them, so they are stated exactly once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PhantomParams, PreprocessOptions};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::SampleOptions;
use crate::error::{Error, Result};
use crate::metrics::{MmdOptions, SsimOptions};
use crate::schedule::ScheduleConfig;
use crate::seg::{SegConfig, SegModelConfig};
use crate::training::{LrStage, TrainConfig};
use crate::volume::Dims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub mmd: MmdOptions,
    pub ssim: SsimOptions,
    pub equalize_bins: usize,
    pub feature_dim: usize,
    pub feature_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { mmd: MmdOptions::default(), ssim: SsimOptions::default(), equalize_bins: 256, feature_dim: 64, feature_seed: 0 }
    }
}

/// Default dataset locations; command-line arguments take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub metrics: MetricConfig,
    pub phantoms: PhantomParams,
    pub preprocess: PreprocessOptions,
    pub data: DataPaths,
    pub seg: SegConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected desk or paper"))),
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::desk(),
            train: TrainConfig::desk(),
            sample: SampleOptions::default(),
            metrics: MetricConfig::default(),
            phantoms: PhantomParams::default(),
            preprocess: PreprocessOptions::default(),
            data: DataPaths::default(),
            seg: SegConfig::default(),
        }
    }

    /// Full-scale settings: 128^3 volumes, T = 250, base width 64, 100k
    /// steps with the 1e-5 then 1e-6 learning rate. Not meant for desk
    /// hardware.
    pub fn paper() -> Self {
        let size = Dims::cube(128);
        Self {
            denoiser: DenoiserConfig::paper(),
            train: TrainConfig::paper(),
            phantoms: PhantomParams { dims: size, ..PhantomParams::default() },
            preprocess: PreprocessOptions::paper(),
            seg: SegConfig { model: SegModelConfig { size, ..SegModelConfig::default() }, ..SegConfig::default() },
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses a TOML document on top of the defaults of `base`: keys
    /// present in the text replace the preset's values section by section.
    pub fn parse(text: &str, base: Preset) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base_text = toml::to_string(&Self::preset(base)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged: toml::Table = toml::from_str(&base_text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text: the same configuration always serialises to the
    /// same bytes.
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_text()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.train_config().validate()?;
        self.phantom_params().validate()?;
        self.seg_config().validate()?;
        if self.metrics.equalize_bins < 2 || self.metrics.feature_dim == 0 {
            return Err(Error::Config("metrics need at least 2 bins and a positive feature dimension".into()));
        }
        if self.phantoms.dims != self.denoiser.size {
            log::warn!("phantom grid {} differs from the denoiser size {}", self.phantoms.dims, self.denoiser.size);
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, schedule: self.schedule, ..self.train.clone() }
    }

    pub fn phantom_params(&self) -> PhantomParams {
        PhantomParams { seed: self.seed, ..self.phantoms.clone() }
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig { seed: self.seed, ..self.seg.clone() }
    }

    pub fn learning_rate_stages(&self) -> &[LrStage] {
        &self.train.learning_rate_stages
    }
}

/// Recursive table merge; non-table values in `overlay` replace `base`.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
