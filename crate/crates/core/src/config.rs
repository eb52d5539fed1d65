//! Experiment configuration, stored as TOML.
//!
//! Every key has a default, so an empty file is a valid configuration and
//! [`Config::dump`] prints the complete set of keys with their values.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{load_backbone, Backbone, BackboneKind, PromptPreset, PromptSet};
use crate::error::{Error, Result};
use crate::fusion::{CrossFusion, DEFAULT_TEMPERATURE};
use crate::losses::LossWeights;
use crate::net::NetworkConfig;
use crate::synth::DegradationRanges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Seed of the stub projections.
    pub seed: u64,
    pub stub_dim: usize,
    /// Weight directory for `vit-l-14`; empty falls back to the environment.
    pub dir: String,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Stub,
            seed: 0,
            stub_dim: crate::backbone::StubBackbone::DEFAULT_DIM,
            dir: String::new(),
        }
    }
}

impl BackboneConfig {
    pub fn load(&self) -> Result<Arc<dyn Backbone>> {
        let dir = (!self.dir.is_empty()).then(|| Path::new(&self.dir));
        load_backbone(self.kind, self.seed, self.stub_dim, dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub temperature: f64,
    pub prompt_preset: PromptPreset,
    /// Custom prompt texts; when non-empty they replace the preset.
    pub prompts: Vec<String>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            prompt_preset: PromptPreset::Joint,
            prompts: Vec::new(),
        }
    }
}

impl FusionConfig {
    pub fn prompt_set(&self) -> Result<PromptSet> {
        if self.prompts.is_empty() {
            Ok(PromptSet::from_preset(self.prompt_preset))
        } else {
            PromptSet::from_texts(&self.prompts)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub crop_size: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub log_interval: u64,
    /// 0 disables periodic evaluation.
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_interval: u64,
    /// Maximum global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 4,
            iterations: 2000,
            crop_size: 64,
            hflip: true,
            vflip: true,
            log_interval: 50,
            eval_interval: 500,
            checkpoint_interval: 500,
            grad_clip: 0.0,
            out_dir: "runs/desk".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `dapled synth`; empty means an in-memory corpus
    /// of procedural scenes.
    pub corpus_dir: String,
    /// Pairs generated when `corpus_dir` is empty.
    pub pairs: usize,
    pub scene_size: usize,
    /// Trailing pairs held out for evaluation.
    pub holdout: usize,
    pub degradation: DegradationRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_dir: String::new(),
            pairs: 64,
            scene_size: 64,
            holdout: 8,
            degradation: DegradationRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub network: NetworkConfig,
    pub fusion: FusionConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            network: NetworkConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The configuration as TOML, every key included.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.crop_size == 0 || t.crop_size % 8 != 0 {
            return Err(Error::config(format!(
                "crop_size must be a positive multiple of 8, got {}",
                t.crop_size
            )));
        }
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if t.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if !(t.learning_rate >= 0.0) || !(t.grad_clip >= 0.0) {
            return Err(Error::config("learning_rate and grad_clip must be non-negative"));
        }
        if !(self.fusion.temperature > 0.0) {
            return Err(Error::config("fusion temperature must be positive"));
        }
        if self.fusion.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::config("custom prompts must not be empty"));
        }
        let d = &self.data;
        if d.corpus_dir.is_empty() {
            if d.pairs <= d.holdout {
                return Err(Error::config("data.pairs must exceed data.holdout"));
            }
            if d.scene_size < t.crop_size {
                return Err(Error::config("data.scene_size must be at least crop_size"));
            }
        }
        if self.backbone.stub_dim == 0 {
            return Err(Error::config("backbone.stub_dim must be positive"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.train.out_dir)
    }

    /// Backbone plus prompt set, ready to produce heatmaps.
    pub fn cross_fusion(&self) -> Result<CrossFusion> {
        CrossFusion::new(self.backbone.load()?, self.fusion.prompt_set()?, self.fusion.temperature)
    }
}
