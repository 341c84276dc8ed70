use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use curvespot::corpus::SceneConfig;
use curvespot::evalkit::EvalConfig;
use curvespot::objective::{config_hash, TrainConfig};
use curvespot::spotter::SpotterConfig;

/// Environment variable selecting the compute device; overrides the config file.
pub const DEVICE_ENV: &str = "CURVESPOT_DEVICE";
pub const SUPPORTED_DEVICES: [&str; 1] = ["cpu"];

pub const TRAIN_INDEX: &str = "train.jsonl";
pub const VAL_INDEX: &str = "val.jsonl";
pub const PARTIAL_INDEX: &str = "partial.jsonl";
pub const LOSS_LOG: &str = "losses.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub scene: SceneConfig,
    /// Training images; the partial pool is carved out of these.
    pub num_samples: usize,
    pub num_val: usize,
    /// Share of generated training images moved to the partially labeled pool.
    pub partial_fraction: f64,
    /// Share of annotations removed from each partial image.
    pub drop_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            num_samples: 400,
            num_val: 50,
            partial_fraction: 0.5,
            drop_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Minimum detection score kept when sweeping the precision/recall curve.
    pub ap_score_threshold: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            ap_score_threshold: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub gen: GenConfig,
    pub model: SpotterConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            data_dir: "data".into(),
            checkpoint_dir: "checkpoint".into(),
            gen: GenConfig::default(),
            model: SpotterConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct HashedPart<'a> {
    seed: u64,
    model: &'a SpotterConfig,
    train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        Ok(cfg)
    }

    /// Device from the environment if set, else from the config; only CPU is available.
    pub fn resolve_device(&self) -> Result<String> {
        let dev = std::env::var(DEVICE_ENV).unwrap_or_else(|_| self.device.clone());
        if !SUPPORTED_DEVICES.contains(&dev.as_str()) {
            bail!(
                "unsupported device {dev:?}; available: {}",
                SUPPORTED_DEVICES.join(", ")
            );
        }
        Ok(dev)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        for (name, v) in [
            ("gen.partial_fraction", self.gen.partial_fraction),
            ("gen.drop_fraction", self.gen.drop_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} must lie in [0, 1], got {v}");
            }
        }
        Ok(())
    }

    /// Hash of everything that determines the trained parameters except the step budget.
    pub fn training_hash(&self) -> Result<String> {
        let train = TrainConfig {
            steps: 0,
            checkpoint_every: 0,
            ..self.train.clone()
        };
        Ok(config_hash(&HashedPart {
            seed: self.seed,
            model: &self.model,
            train,
        })?)
    }
}
