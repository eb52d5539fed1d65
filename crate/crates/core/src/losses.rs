//! Training objective: Charbonnier reconstruction, embedding-space identity
//! loss, degradation-prompt similarity loss and their weighted sum.
//!
//! All functions take batched `(N, 3, H, W)` tensors and return scalar
//! tensors that stay on the autograd tape.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CharbonnierForm {
    /// `mean_i sqrt(dᵢ² + ε²)`.
    #[default]
    PerElementMean,
    /// `sqrt(‖d‖² + ε²)` per image, averaged over the batch.
    GlobalNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_identity: f64,
    pub lambda_clip: f64,
    pub epsilon: f64,
    pub charbonnier_form: CharbonnierForm,
    /// Multiplies the prompt-similarity term. `+1` minimises similarity to
    /// the degradation description; `-1` maximises it.
    pub clip_sign: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_identity: 0.1,
            lambda_clip: 0.01,
            epsilon: 1e-3,
            charbonnier_form: CharbonnierForm::PerElementMean,
            clip_sign: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("charbonnier epsilon must be positive"));
        }
        if !(self.lambda_identity >= 0.0) || !(self.lambda_clip >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.clip_sign != 1.0 && self.clip_sign != -1.0 {
            return Err(Error::config("clip_sign must be +1 or -1"));
        }
        Ok(())
    }

    pub fn rec_only(&self) -> Self {
        Self {
            lambda_identity: 0.0,
            lambda_clip: 0.0,
            ..self.clone()
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "restored {:?} and target {:?} differ in shape",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn charbonnier(restored: &Tensor, target: &Tensor, eps: f64, form: CharbonnierForm) -> Result<Tensor> {
    same_shape(restored, target)?;
    if !(eps > 0.0) && form == CharbonnierForm::PerElementMean {
        return Err(Error::config("charbonnier epsilon must be positive"));
    }
    let diff2 = (restored - target)?.sqr()?;
    let eps2 = eps * eps;
    match form {
        CharbonnierForm::PerElementMean => Ok((diff2 + eps2)?.sqrt()?.mean_all()?),
        CharbonnierForm::GlobalNorm => {
            let per_image = diff2.flatten_from(1)?.sum(1)?;
            Ok((per_image + eps2)?.sqrt()?.mean_all()?)
        }
    }
}

/// `sqrt(s)` written as `s / sqrt(s + τ)` so that it is exactly zero at
/// `s = 0` with a finite gradient there.
fn safe_sqrt(s: &Tensor) -> Result<Tensor> {
    Ok((s / (s + 1e-24)?.sqrt()?)?)
}

/// Mean over the batch of `‖E(restored) − E(target)‖₂`.
pub fn identity_loss(restored: &Tensor, target: &Tensor, backbone: &dyn Backbone) -> Result<Tensor> {
    same_shape(restored, target)?;
    let a = backbone.image_embeddings(restored)?;
    let b = backbone.image_embeddings(target)?;
    let s = (a - b)?.sqr()?.sum(D::Minus1)?;
    Ok(safe_sqrt(&s)?.mean_all()?)
}

/// Mean cosine similarity between restored-image embeddings `(N, d)` and
/// prompt embeddings `(P, d)`, over all `N × P` pairs.
pub fn cosine_to_prompts(image_embeds: &Tensor, prompt_embeds: &Tensor) -> Result<Tensor> {
    let (_, d) = image_embeds.dims2()?;
    let (_, dp) = prompt_embeds.dims2()?;
    if d != dp {
        return Err(Error::shape(format!(
            "image embedding dim {d} does not match prompt dim {dp}"
        )));
    }
    let prompts = prompt_embeds.to_dtype(image_embeds.dtype())?;
    let inorm = image_embeds.sqr()?.sum_keepdim(D::Minus1)?;
    let pnorm = prompts.sqr()?.sum_keepdim(D::Minus1)?;
    let zero = |t: &Tensor| -> Result<bool> {
        Ok(t.flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .any(|&v| v == 0.0))
    };
    if zero(&inorm)? || zero(&pnorm)? {
        return Err(Error::Numeric(
            "cosine similarity with a zero-norm embedding".into(),
        ));
    }
    let a = image_embeds.broadcast_div(&inorm.sqrt()?)?;
    let b = prompts.broadcast_div(&pnorm.sqrt()?)?;
    Ok(a.matmul(&b.t()?)?.mean_all()?)
}

pub fn clip_loss(restored: &Tensor, prompt_embeds: &Tensor, backbone: &dyn Backbone) -> Result<Tensor> {
    cosine_to_prompts(&backbone.image_embeddings(restored)?, prompt_embeds)
}

/// Scalar loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub identity: f64,
    /// Signed similarity term (`clip_sign × cosine`).
    pub clip: f64,
    pub total: f64,
}

impl LossReport {
    /// Combines component values; `total` is the weighted sum in `f64`.
    pub fn from_components(rec: f64, identity: f64, clip: f64, weights: &LossWeights) -> Result<Self> {
        for (name, v) in [("rec", rec), ("identity", identity), ("clip", clip)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: name,
                    rec,
                    identity,
                    clip,
                });
            }
        }
        let total = rec + weights.lambda_identity * identity + weights.lambda_clip * clip;
        Ok(Self {
            rec,
            identity,
            clip,
            total,
        })
    }
}

/// Differentiable total plus the logged components.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub fn total_loss(
    restored: &Tensor,
    target: &Tensor,
    prompt_embeds: &Tensor,
    weights: &LossWeights,
    backbone: &dyn Backbone,
) -> Result<LossTerms> {
    weights.validate()?;
    let rec = charbonnier(restored, target, weights.epsilon, weights.charbonnier_form)?;
    let identity = identity_loss(restored, target, backbone)?;
    let clip = (clip_loss(restored, prompt_embeds, backbone)? * weights.clip_sign)?;
    let report = LossReport::from_components(scalar(&rec)?, scalar(&identity)?, scalar(&clip)?, weights)?;

    let mut total = rec;
    if weights.lambda_identity != 0.0 {
        total = (total + (identity * weights.lambda_identity)?)?;
    }
    if weights.lambda_clip != 0.0 {
        total = (total + (clip * weights.lambda_clip)?)?;
    }
    Ok(LossTerms { total, report })
}
