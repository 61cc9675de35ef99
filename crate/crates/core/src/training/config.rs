//! Flat `key = value` run configuration: model keys and training keys share
//! one namespace.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::loss::{LossKind, CHARBONNIER_EPS};
use super::schedule::Schedule;
use crate::data::{NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::model::config::hex;
use crate::model::{ModelConfig, SIZE_MULTIPLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Defaults to two thirds of `iterations`.
    pub decay_start: Option<u64>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub loss: String,
    pub charbonnier_eps: f64,
    pub noise: NoiseKind,
    pub noise_sigma: f64,
    pub noise_peak: f64,
    pub augment: bool,
    /// Directory with `clean/` (and optionally `noisy/`) PNGs.
    pub data_dir: Option<PathBuf>,
    /// Procedural textures used when no data directory is given.
    pub synthetic_images: usize,
    pub synthetic_size: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 288_000,
            batch_size: 4,
            patch_size: 128,
            lr: 3e-4,
            lr_floor: 1e-6,
            decay_start: None,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            loss: "l1".into(),
            charbonnier_eps: CHARBONNIER_EPS,
            noise: NoiseKind::Mixed,
            noise_sigma: 10.0,
            noise_peak: 255.0,
            augment: true,
            data_dir: None,
            synthetic_images: 0,
            synthetic_size: 128,
            log_every: 100,
            checkpoint_every: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
}

fn model_keys() -> Vec<String> {
    match toml::Value::try_from(ModelConfig::default()).expect("config serializes") {
        toml::Value::Table(t) => t.keys().cloned().collect(),
        _ => unreachable!("struct serializes to a table"),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let keys = model_keys();
        let (mut model, mut train) = (toml::Table::new(), toml::Table::new());
        for (k, v) in table {
            if keys.contains(&k) {
                model.insert(k, v);
            } else {
                train.insert(k, v);
            }
        }
        let model: ModelConfig = model.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train: TrainSettings = train.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let cfg = Self { model, train };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut table = match toml::Value::try_from(&self.model).expect("serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!(),
        };
        if let toml::Value::Table(t) = toml::Value::try_from(&self.train).expect("serializes") {
            table.extend(t);
        }
        toml::to_string(&table).expect("serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if t.patch_size == 0 || !t.patch_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {SIZE_MULTIPLE}",
                t.patch_size
            )));
        }
        if !(t.lr > 0.0) || !(t.lr_floor >= 0.0) || t.lr_floor > t.lr {
            return Err(Error::Config("need lr > 0 and 0 <= lr_floor <= lr".into()));
        }
        if self.schedule().decay_start > t.iterations {
            return Err(Error::Config("decay_start exceeds iterations".into()));
        }
        if t.log_every == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("log_every and checkpoint_every must be positive".into()));
        }
        self.loss()?;
        self.noise().validate()
    }

    pub fn schedule(&self) -> Schedule {
        let t = &self.train;
        Schedule {
            total: t.iterations,
            base: t.lr,
            floor: t.lr_floor,
            decay_start: t.decay_start.unwrap_or(t.iterations * 2 / 3),
        }
    }

    pub fn loss(&self) -> Result<LossKind> {
        LossKind::parse(&self.train.loss, self.train.charbonnier_eps)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.train.noise,
            sigma: self.train.noise_sigma,
            peak: self.train.noise_peak,
        }
    }

    /// Hash over everything that shapes the training trajectory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.model).expect("serializes"));
        let mut t = self.train.clone();
        // bookkeeping cadence does not change the trajectory
        t.log_every = 0;
        t.checkpoint_every = 0;
        t.decay_start = Some(self.schedule().decay_start);
        h.update(serde_json::to_vec(&t).expect("serializes"));
        hex(&h.finalize())
    }
}
