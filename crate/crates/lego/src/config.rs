//! Declarative run description and the TOML file format.

use std::path::{Path, PathBuf};

use lego_core::configs::{dit_l_baseline, lego, lego_s_mini, ModelSize};
use lego_core::optim::{LrMode, TrainConfig};
use lego_core::sampler::EdmSamplerParams;
use lego_core::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use lego_core::stack::{Preconditioning, RefineMode, StackConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::{BlobSpec, DatasetSpec, ImageDirSpec};
use crate::error::{Error, Result};

/// Environment variable overriding `train.seed`.
pub const ENV_SEED: &str = "LEGO_SEED";
/// Environment variable overriding `output.dir`.
pub const ENV_OUT_DIR: &str = "LEGO_OUT_DIR";

/// Linear beta schedule of the discrete diffusion chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

fn default_ddpm_steps() -> usize {
    250
}

/// Sampling defaults; the CLI flags override them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    /// Reverse steps of the strided ancestral sampler.
    #[serde(default = "default_ddpm_steps")]
    pub ddpm_steps: usize,
    #[serde(default)]
    pub edm: EdmSamplerParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            ddpm_steps: default_ddpm_steps(),
            edm: EdmSamplerParams::default(),
            cfg_scale: None,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/lego")
}

fn default_log_every() -> u64 {
    10
}

fn default_checkpoint_every() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Steps between metric records.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Steps between checkpoints (the final step always checkpoints).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: default_out_dir(),
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: StackConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Learning-rate schedule implied by the preconditioning.
pub fn lr_mode(model: &StackConfig) -> LrMode {
    match model.precond {
        Preconditioning::Ddpm => LrMode::Ddpm,
        Preconditioning::Edm { .. } => LrMode::Edm,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.schedule.build()?;
        self.sampler.edm.validate()?;
        if self.dataset.resolution() != self.model.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {:?} differs from model resolution {:?}",
                self.dataset.resolution(),
                self.model.resolution
            )));
        }
        if self.dataset.num_classes() != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {}",
                self.dataset.num_classes(),
                self.model.num_classes
            )));
        }
        if self.output.log_every == 0 || self.output.checkpoint_every == 0 {
            return Err(Error::Config("log_every and checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, applies the environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `LEGO_SEED` and `LEGO_OUT_DIR` as returned by `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = var(ENV_SEED) {
            self.train.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED}={s:?} is not an unsigned integer")))?;
        }
        if let Some(d) = var(ENV_OUT_DIR) {
            self.output.dir = PathBuf::from(d);
        }
        Ok(())
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "lego-s-64-pg",
    "lego-s-64-pr",
    "lego-s-64-u",
    "lego-l-64-pg",
    "lego-l-64-pr",
    "lego-l-64-u",
    "lego-xl-64-pg",
    "lego-xl-64-pr",
    "lego-xl-64-u",
    "lego-s-32-pg",
    "lego-s-32-pr",
    "lego-l-32-pg",
    "lego-l-32-pr",
    "lego-xl-32-pg",
    "lego-xl-32-pr",
    "dit-l-64",
    "lego-s-mini-pg",
    "lego-s-mini-pr",
];

/// Training settings of the desk-scale configuration.
pub fn mini_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_images: 0,
        batch_size: 8,
        total_images: 5000 * 8,
        ema_decay: 0.999,
        seed,
        ..TrainConfig::default()
    }
}

fn parse_mode(s: &str) -> Option<RefineMode> {
    match s {
        "pg" => Some(RefineMode::Pg),
        "pr" => Some(RefineMode::Pr),
        "u" => Some(RefineMode::U),
        _ => None,
    }
}

/// A complete run configuration for a named reference layout.
pub fn preset(name: &str) -> Result<RunConfig> {
    let unknown = || Error::Config(format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")));
    if !PRESETS.contains(&name) {
        return Err(unknown());
    }
    if let Some(mode) = name.strip_prefix("lego-s-mini-") {
        let model = lego_s_mini(parse_mode(mode).ok_or_else(unknown)?);
        let dataset = DatasetSpec::SyntheticBlobs(BlobSpec::new(model.resolution, model.num_classes, 0));
        return Ok(RunConfig {
            model,
            train: mini_train_config(0),
            schedule: ScheduleSpec::default(),
            sampler: SamplerSpec {
                ddpm_steps: 100,
                ..SamplerSpec::default()
            },
            dataset,
            output: OutputSpec {
                dir: PathBuf::from(format!("runs/{name}")),
                log_every: 50,
                checkpoint_every: 1000,
            },
        });
    }
    let model = if name == "dit-l-64" {
        dit_l_baseline()
    } else {
        let parts: Vec<&str> = name.split('-').collect();
        let size = match parts[1] {
            "s" => ModelSize::S,
            "l" => ModelSize::L,
            "xl" => ModelSize::XL,
            _ => return Err(unknown()),
        };
        let res: usize = parts[2].parse().map_err(|_| unknown())?;
        lego(size, res, parse_mode(parts[3]).ok_or_else(unknown)?)?
    };
    let dataset = DatasetSpec::ImageDir(ImageDirSpec {
        path: PathBuf::from("data/train"),
        resolution: model.resolution,
        num_classes: model.num_classes,
        seed: 0,
    });
    Ok(RunConfig {
        model,
        train: TrainConfig::default(),
        schedule: ScheduleSpec::default(),
        sampler: SamplerSpec::default(),
        dataset,
        output: OutputSpec {
            dir: PathBuf::from(format!("runs/{name}")),
            ..OutputSpec::default()
        },
    })
}
