use std::sync::OnceLock;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{Error, Result};

/// The joint-degradation description used by default.
pub const JOINT_PROMPT: &str = "This is a low-light and blurry image.";
pub const LOWLIGHT_PROMPT: &str = "This is a low-light image.";
pub const BLUR_PROMPT: &str = "This is a blurry image.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptRole {
    Joint,
    LowlightOnly,
    BlurOnly,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub role: PromptRole,
}

/// Named prompt configurations used by the prompt ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptPreset {
    #[default]
    Joint,
    Lowlight,
    Deblur,
}

impl PromptPreset {
    pub fn prompt(self) -> Prompt {
        match self {
            PromptPreset::Joint => Prompt {
                text: JOINT_PROMPT.into(),
                role: PromptRole::Joint,
            },
            PromptPreset::Lowlight => Prompt {
                text: LOWLIGHT_PROMPT.into(),
                role: PromptRole::LowlightOnly,
            },
            PromptPreset::Deblur => Prompt {
                text: BLUR_PROMPT.into(),
                role: PromptRole::BlurOnly,
            },
        }
    }
}

/// An ordered, non-empty list of prompts with a lazily filled embedding cache.
///
/// The cache remembers which backbone produced it; asking for embeddings
/// from a different backbone recomputes them without touching the cache.
#[derive(Debug, Clone)]
pub struct PromptSet {
    prompts: Vec<Prompt>,
    cache: OnceLock<(String, Tensor)>,
}

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Validation("prompt set must not be empty".into()));
        }
        if let Some(p) = prompts.iter().find(|p| p.text.trim().is_empty()) {
            return Err(Error::Validation(format!(
                "empty prompt string ({:?} role)",
                p.role
            )));
        }
        Ok(Self {
            prompts,
            cache: OnceLock::new(),
        })
    }

    pub fn from_preset(preset: PromptPreset) -> Self {
        Self::new(vec![preset.prompt()]).expect("presets are non-empty")
    }

    /// Custom prompts; roles are inferred for the built-in descriptions.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        Self::new(
            texts
                .iter()
                .map(|t| {
                    let text = t.as_ref().to_string();
                    let role = match text.as_str() {
                        JOINT_PROMPT => PromptRole::Joint,
                        LOWLIGHT_PROMPT => PromptRole::LowlightOnly,
                        BLUR_PROMPT => PromptRole::BlurOnly,
                        _ => PromptRole::Custom,
                    };
                    Prompt { text, role }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.text.as_str()).collect()
    }

    pub fn is_cached(&self) -> bool {
        self.cache.get().is_some()
    }

    /// `(P, d)` embeddings in `F32`.
    pub fn embeddings(&self, backbone: &dyn Backbone) -> Result<Tensor> {
        let key = backbone.id();
        if let Some((k, t)) = self.cache.get() {
            if *k == key {
                return Ok(t.clone());
            }
            return self.compute(backbone);
        }
        let t = self.compute(backbone)?;
        // A concurrent initialiser may win; both computed the same values.
        let (k, cached) = self.cache.get_or_init(|| (key.clone(), t.clone()));
        Ok(if *k == key { cached.clone() } else { t })
    }

    fn compute(&self, backbone: &dyn Backbone) -> Result<Tensor> {
        let t = backbone.text_embeddings(&self.texts())?;
        let (rows, _) = t.dims2()?;
        if rows != self.prompts.len() {
            return Err(Error::Backbone(format!(
                "text encoder returned {rows} rows for {} prompts",
                self.prompts.len()
            )));
        }
        Ok(t)
    }
}
