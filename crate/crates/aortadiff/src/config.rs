//! Flat run configuration, precedence handling, and run metadata.
//!
//! One flat JSON object carries every tunable (schedule, network, trainer,
//! sampler). Precedence: command-line flag > `AORTADIFF_SEED` env var >
//! config file > built-in default. Every run writes a `run_meta.json`
//! with the fully resolved configuration so that identical metadata
//! implies identical outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::schedule::ScheduleConfig;

/// Training arm. `semi-sup` accepts the alias `joint`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Joint objective, labeled warm-up, 1:1 labeled/unlabeled mixing.
    #[value(name = "semi-sup", alias = "joint")]
    SemiSup,
    /// Joint objective restricted to the labeled pool.
    #[value(name = "full-sup")]
    FullSup,
    /// Reconstruction only; the SDF head and segmentation loss are off.
    #[value(name = "gen-only")]
    GenOnly,
    /// Segmentation only; the reconstruction loss is off.
    #[value(name = "seg-only")]
    SegOnly,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::SemiSup => "semi-sup",
            TrainMode::FullSup => "full-sup",
            TrainMode::GenOnly => "gen-only",
            TrainMode::SegOnly => "seg-only",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "semi-sup" | "joint" => Ok(TrainMode::SemiSup),
            "full-sup" => Ok(TrainMode::FullSup),
            "gen-only" => Ok(TrainMode::GenOnly),
            "seg-only" => Ok(TrainMode::SegOnly),
            other => Err(Error::Config(format!("unknown training mode {other}"))),
        }
    }

    pub fn uses_seg(&self) -> bool {
        !matches!(self, TrainMode::GenOnly)
    }

    pub fn uses_recon(&self) -> bool {
        !matches!(self, TrainMode::SegOnly)
    }
}

/// Every tunable in one flat structure. Serialized form is the config
/// file format and the `run_meta.json` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // global
    pub seed: u64,

    // noise schedule
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // network
    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,

    // trainer
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub warmup_epochs: usize,
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub bbox_pad_px: usize,
    /// SDF clamp radius as a fraction of the image side.
    pub sdf_clamp_frac: f64,
    pub perceptual_seed: u64,

    // sampler
    pub jump: usize,
    pub resamples: usize,
    /// Average the SDF head output over the last k reverse steps.
    pub sdf_avg_last_k: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_size: 64,
            base_width: 32,
            depth: 3,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 64,
            learning_rate: 1e-4,
            batch_size: 16,
            total_iterations: 20_000,
            warmup_epochs: 1,
            grad_clip_norm: 1.0,
            checkpoint_every: 1000,
            log_every: 1,
            bbox_pad_px: 4,
            sdf_clamp_frac: 0.1,
            perceptual_seed: 7171,
            jump: 10,
            resamples: 2,
            sdf_avg_last_k: 1,
        }
    }
}

impl Config {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            base_width: self.base_width,
            depth: self.depth,
            channel_mults: self.channel_mults.clone(),
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn sdf_clamp_px(&self) -> f64 {
        (self.sdf_clamp_frac * self.image_size as f64).max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.net().validate()?;
        crate::schedule::make_linear_schedule(&self.schedule())?;
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.jump == 0 {
            return Err(Error::Config("jump must be >= 1".into()));
        }
        if self.sdf_avg_last_k == 0 {
            return Err(Error::Config("sdf_avg_last_k must be >= 1".into()));
        }
        if !(self.sdf_clamp_frac > 0.0) {
            return Err(Error::Config("sdf_clamp_frac must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the `AORTADIFF_SEED` environment override (flags are applied
    /// by the CLI afterwards, giving flag > env > file > default).
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("AORTADIFF_SEED") {
            let seed: u64 = v
                .parse()
                .map_err(|_| Error::Config(format!("AORTADIFF_SEED not a u64: {v}")))?;
            self.seed = seed;
        }
        Ok(())
    }
}

/// Resolved run description written next to every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub artifact_version: String,
    pub subcommand: String,
    pub mode: Option<String>,
    pub config: Config,
    pub paths: Vec<(String, String)>,
}

impl RunMeta {
    pub fn new(subcommand: &str, mode: Option<&str>, config: &Config) -> Self {
        RunMeta {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            mode: mode.map(|m| m.to_string()),
            config: config.clone(),
            paths: Vec::new(),
        }
    }

    pub fn with_path(mut self, key: &str, value: &Path) -> Self {
        self.paths
            .push((key.to_string(), value.display().to_string()));
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_meta.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("run_meta: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
