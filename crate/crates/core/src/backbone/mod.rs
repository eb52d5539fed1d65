//! Frozen image/text encoder pair.
//!
//! Every encoder implements [`Backbone`], which works on batched
//! `(N, 3, H, W)` tensors in `[0, 1]` so that embeddings stay differentiable
//! with respect to the input image. Two implementations ship with the crate:
//!
//! * [`StubBackbone`], a tiny seeded encoder with a closed-form definition,
//!   used for tests and desk-scale training;
//! * [`ClipBackbone`], a CLIP ViT-L/14 encoder loaded from pretrained weights.
//!
//! The free functions in this module ([`encode_image_patches`],
//! [`encode_image_global`], [`encode_text`], [`score_degradations`]) are the
//! host-side entry points used by the fusion module and the CLI.

mod clip;
mod prompts;
mod stub;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use clip::{ClipBackbone, ClipConfig, ClipTextConfig, ClipVisionConfig};
pub use prompts::{Prompt, PromptPreset, PromptRole, PromptSet, JOINT_PROMPT};
pub use stub::StubBackbone;

/// Environment variable consulted when no backbone directory is configured.
pub const BACKBONE_DIR_ENV: &str = "DAPLED_BACKBONE_DIR";

/// A frozen vision-language encoder pair.
///
/// Implementations must be deterministic and must not mutate their weights.
pub trait Backbone: Send + Sync {
    /// Stable identifier, used as the prompt-embedding cache key.
    fn id(&self) -> String;

    /// Dimension of the shared image/text embedding space.
    fn embed_dim(&self) -> usize;

    /// Patch grid `(rows, cols)` produced by [`Backbone::patch_tokens`].
    fn grid(&self) -> (usize, usize);

    /// Patch tokens projected into the shared space, `(N, rows*cols, d)`,
    /// row-major over the grid. The class token is never included.
    fn patch_tokens(&self, images: &Tensor) -> Result<Tensor>;

    /// Pooled, projected whole-image embeddings, `(N, d)`.
    fn image_embeddings(&self, images: &Tensor) -> Result<Tensor>;

    /// One embedding per prompt, `(P, d)`, in `F32`.
    fn text_embeddings(&self, prompts: &[&str]) -> Result<Tensor>;
}

/// Backbone selection as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BackboneKind {
    #[serde(rename = "stub")]
    #[default]
    Stub,
    #[serde(rename = "vit-l-14")]
    VitL14,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Self::Stub),
            "vit-l-14" => Ok(Self::VitL14),
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected `stub` or `vit-l-14`)"
            ))),
        }
    }
}

/// Builds the configured backbone. For `vit-l-14` the weight directory is
/// `dir` if given, otherwise `$DAPLED_BACKBONE_DIR`.
pub fn load_backbone(
    kind: BackboneKind,
    seed: u64,
    stub_dim: usize,
    dir: Option<&std::path::Path>,
) -> Result<Arc<dyn Backbone>> {
    match kind {
        BackboneKind::Stub => Ok(Arc::new(StubBackbone::new(seed, stub_dim)?)),
        BackboneKind::VitL14 => {
            let dir = match dir {
                Some(d) => d.to_path_buf(),
                None => std::env::var_os(BACKBONE_DIR_ENV)
                    .map(std::path::PathBuf::from)
                    .ok_or_else(|| {
                        Error::Backbone(format!(
                            "vit-l-14 requires backbone_dir or ${BACKBONE_DIR_ENV}"
                        ))
                    })?,
            };
            Ok(Arc::new(ClipBackbone::load(&dir, ClipConfig::vit_l_14())?))
        }
    }
}

/// Patch-token embeddings for one image, without the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingGrid {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchEmbeddingGrid {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(Error::shape("patch grid dimensions must be positive"));
        }
        if data.len() != grid_h * grid_w * dim {
            return Err(Error::shape(format!(
                "patch grid buffer has {} values, expected {grid_h}x{grid_w}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite patch embedding".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Embedding of patch `(i, j)`.
    pub fn patch(&self, i: usize, j: usize) -> &[f32] {
        let off = (i * self.grid_w + j) * self.dim;
        &self.data[off..off + self.dim]
    }
}

/// Whole-image or whole-text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding(pub Vec<f32>);

impl GlobalEmbedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn l2_distance(&self, other: &GlobalEmbedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Checks an image batch is `(N, 3, H, W)` with finite values.
pub(crate) fn check_image_batch(images: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = images.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::shape(format!(
            "expected an (N, 3, H, W) image batch, got {dims:?}"
        )));
    }
    Ok((dims[0], dims[2], dims[3]))
}

/// Row-wise L2 normalisation along the last dimension, differentiable.
/// A tiny stabiliser keeps the gradient defined at zero.
pub(crate) fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let norm = (t.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(t.broadcast_div(&norm)?)
}

fn single_image(image: &ImageTensor) -> Result<Tensor> {
    image.validate()?;
    image.to_tensor(&Device::Cpu, DType::F32)
}

pub fn encode_image_patches(backbone: &dyn Backbone, image: &ImageTensor) -> Result<PatchEmbeddingGrid> {
    let tokens = backbone.patch_tokens(&single_image(image)?)?;
    let (gh, gw) = backbone.grid();
    let data = tokens.squeeze(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    PatchEmbeddingGrid::new(gh, gw, backbone.embed_dim(), data)
}

pub fn encode_image_global(backbone: &dyn Backbone, image: &ImageTensor) -> Result<GlobalEmbedding> {
    let e = backbone.image_embeddings(&single_image(image)?)?;
    let v: Vec<f32> = e.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite image embedding".into()));
    }
    Ok(GlobalEmbedding(v))
}

/// Prompt embeddings `(P, d)`; cached inside the prompt set.
pub fn encode_text(backbone: &dyn Backbone, prompts: &PromptSet) -> Result<Tensor> {
    prompts.embeddings(backbone)
}

/// Cosine similarity of two vectors. Zero-norm inputs are an error.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cannot compare embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity of a zero-norm embedding is undefined".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Zero-shot similarity of one image against every prompt of a set.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationScores {
    pub entries: Vec<(String, f64)>,
}

impl DegradationScores {
    /// Softmax over `scale · cosine`. CLIP's learned logit scale is 100.
    pub fn softmax(&self, scale: f64) -> Vec<(String, f64)> {
        let max = self
            .entries
            .iter()
            .map(|(_, s)| scale * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.entries.iter().map(|(_, s)| (scale * s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        self.entries
            .iter()
            .zip(exps)
            .map(|((p, _), e)| (p.clone(), e / z))
            .collect()
    }

    pub fn score(&self, prompt: &str) -> Option<f64> {
        self.entries.iter().find(|(p, _)| p == prompt).map(|(_, s)| *s)
    }
}

pub fn score_degradations(
    backbone: &dyn Backbone,
    image: &ImageTensor,
    prompts: &PromptSet,
) -> Result<DegradationScores> {
    let img = encode_image_global(backbone, image)?;
    let text = prompts.embeddings(backbone)?;
    let rows: Vec<Vec<f32>> = text.to_dtype(DType::F32)?.to_vec2()?;
    let mut entries = Vec::with_capacity(rows.len());
    for (prompt, row) in prompts.iter().zip(rows) {
        entries.push((prompt.text.clone(), cosine_similarity(img.as_slice(), &row)?));
    }
    Ok(DegradationScores { entries })
}
