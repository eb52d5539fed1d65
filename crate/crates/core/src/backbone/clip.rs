//! CLIP ViT image/text encoders in the Hugging Face weight layout.
//!
//! Weights are read from `model.safetensors` and the tokenizer from
//! `tokenizer.json` inside the backbone directory (the files published with
//! `openai/clip-vit-large-patch14`).

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};
use tokenizers::Tokenizer;

use super::{check_image_batch, Backbone};
use crate::error::{Error, Result};
use crate::resize::resize_bilinear;

const IMAGE_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const IMAGE_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq)]
pub struct ClipVisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipTextConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub eos_token_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    pub vision: ClipVisionConfig,
    pub text: ClipTextConfig,
    pub projection_dim: usize,
}

impl ClipConfig {
    pub fn vit_l_14() -> Self {
        Self {
            vision: ClipVisionConfig {
                image_size: 224,
                patch_size: 14,
                hidden: 1024,
                layers: 24,
                heads: 16,
                intermediate: 4096,
            },
            text: ClipTextConfig {
                vocab_size: 49408,
                hidden: 768,
                layers: 12,
                heads: 12,
                intermediate: 3072,
                max_positions: 77,
                eos_token_id: 49407,
            },
            projection_dim: 768,
        }
    }

    pub fn grid(&self) -> usize {
        self.vision.image_size / self.vision.patch_size
    }
}

const LN_EPS: f64 = 1e-5;

/// Layer norm over the last dimension built from primitive ops, so that it
/// stays differentiable with respect to its input.
#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

fn layer_norm(size: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<LayerNorm> {
    Ok(LayerNorm {
        weight: vb.get_with_hints(size, "weight", candle_nn::Init::Const(1.0))?,
        bias: vb.get_with_hints(size, "bias", candle_nn::Init::Const(0.0))?,
        eps,
    })
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

fn quick_gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x * candle_nn::ops::sigmoid(&(x * 1.702)?)?
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    fn new(vb: VarBuilder, hidden: usize, heads: usize) -> candle_core::Result<Self> {
        Ok(Self {
            q: linear(hidden, hidden, vb.pp("q_proj"))?,
            k: linear(hidden, hidden, vb.pp("k_proj"))?,
            v: linear(hidden, hidden, vb.pp("v_proj"))?,
            out: linear(hidden, hidden, vb.pp("out_proj"))?,
            heads,
            head_dim: hidden / heads,
        })
    }

    fn forward(&self, x: &Tensor, causal: bool) -> candle_core::Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((b, n, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()
        };
        let scale = (self.head_dim as f64).powf(-0.5);
        let q = split((self.q.forward(x)? * scale)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut attn = q.matmul(&k.t()?)?;
        if causal {
            let mask: Vec<f32> = (0..n)
                .flat_map(|i| (0..n).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
                .collect();
            let mask = Tensor::from_slice(&mask, (n, n), x.device())?.to_dtype(attn.dtype())?;
            attn = attn.broadcast_add(&mask)?;
        }
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    fn new(vb: VarBuilder, hidden: usize, heads: usize, intermediate: usize) -> candle_core::Result<Self> {
        Ok(Self {
            ln1: layer_norm(hidden, LN_EPS, vb.pp("layer_norm1"))?,
            attn: Attention::new(vb.pp("self_attn"), hidden, heads)?,
            ln2: layer_norm(hidden, LN_EPS, vb.pp("layer_norm2"))?,
            fc1: linear(hidden, intermediate, vb.pp("mlp").pp("fc1"))?,
            fc2: linear(intermediate, hidden, vb.pp("mlp").pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor, causal: bool) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, causal)?)?;
        let h = self.fc2.forward(&quick_gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        x + h
    }
}

fn encoder(vb: VarBuilder, n: usize, hidden: usize, heads: usize, inter: usize) -> candle_core::Result<Vec<EncoderLayer>> {
    let vb = vb.pp("encoder").pp("layers");
    (0..n)
        .map(|i| EncoderLayer::new(vb.pp(i.to_string()), hidden, heads, inter))
        .collect()
}

#[derive(Debug, Clone)]
struct VisionTower {
    patch_weight: Tensor,
    class_embedding: Tensor,
    position_embedding: Tensor,
    pre_ln: LayerNorm,
    layers: Vec<EncoderLayer>,
    post_ln: LayerNorm,
    cfg: ClipVisionConfig,
}

impl VisionTower {
    fn new(vb: VarBuilder, cfg: &ClipVisionConfig) -> candle_core::Result<Self> {
        let emb = vb.pp("embeddings");
        let grid = cfg.image_size / cfg.patch_size;
        Ok(Self {
            patch_weight: emb.get(
                (cfg.hidden, 3, cfg.patch_size, cfg.patch_size),
                "patch_embedding.weight",
            )?,
            class_embedding: emb.get(cfg.hidden, "class_embedding")?,
            position_embedding: emb.get((grid * grid + 1, cfg.hidden), "position_embedding.weight")?,
            // The published checkpoints spell it this way.
            pre_ln: layer_norm(cfg.hidden, LN_EPS, vb.pp("pre_layrnorm"))?,
            layers: encoder(vb.clone(), cfg.layers, cfg.hidden, cfg.heads, cfg.intermediate)?,
            post_ln: layer_norm(cfg.hidden, LN_EPS, vb.pp("post_layernorm"))?,
            cfg: cfg.clone(),
        })
    }

    /// Post-layernorm hidden states `(N, 1 + grid², hidden)`; index 0 is CLS.
    fn forward(&self, pixels: &Tensor) -> candle_core::Result<Tensor> {
        let b = pixels.dim(0)?;
        let patches = pixels.conv2d(&self.patch_weight, 0, self.cfg.patch_size, 1, 1)?;
        let patches = patches.flatten_from(2)?.transpose(1, 2)?; // (N, g², hidden)
        let cls = self
            .class_embedding
            .reshape((1, 1, self.cfg.hidden))?
            .broadcast_as((b, 1, self.cfg.hidden))?;
        let x = Tensor::cat(&[&cls, &patches], 1)?;
        let mut x = self.pre_ln.forward(&x.broadcast_add(&self.position_embedding)?)?;
        for layer in &self.layers {
            x = layer.forward(&x, false)?;
        }
        self.post_ln.forward(&x)
    }
}

#[derive(Debug, Clone)]
struct TextTower {
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    cfg: ClipTextConfig,
}

impl TextTower {
    fn new(vb: VarBuilder, cfg: &ClipTextConfig) -> candle_core::Result<Self> {
        let emb = vb.pp("embeddings");
        Ok(Self {
            token_embedding: emb.get((cfg.vocab_size, cfg.hidden), "token_embedding.weight")?,
            position_embedding: emb.get((cfg.max_positions, cfg.hidden), "position_embedding.weight")?,
            layers: encoder(vb.clone(), cfg.layers, cfg.hidden, cfg.heads, cfg.intermediate)?,
            final_ln: layer_norm(cfg.hidden, LN_EPS, vb.pp("final_layer_norm"))?,
            cfg: cfg.clone(),
        })
    }

    /// Pooled output at the end-of-text token, `(hidden,)`.
    fn forward(&self, ids: &[u32]) -> candle_core::Result<Tensor> {
        let n = ids.len();
        let ids_t = Tensor::from_slice(ids, n, self.token_embedding.device())?;
        let x = self.token_embedding.index_select(&ids_t, 0)?;
        let x = (x + self.position_embedding.narrow(0, 0, n)?)?.unsqueeze(0)?;
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(&x, true)?;
        }
        let x = self.final_ln.forward(&x)?;
        let eos = ids
            .iter()
            .position(|&t| t == self.cfg.eos_token_id)
            .unwrap_or(n - 1);
        x.i((0, eos))
    }
}

/// CLIP image and text encoders with their projections into the shared space.
pub struct ClipBackbone {
    vision: VisionTower,
    visual_projection: Linear,
    text: TextTower,
    text_projection: Linear,
    tokenizer: Option<Tokenizer>,
    config: ClipConfig,
    id: String,
}

impl ClipBackbone {
    /// Loads `model.safetensors` and `tokenizer.json` from `dir`.
    pub fn load(dir: &Path, config: ClipConfig) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        if !weights.exists() {
            return Err(Error::Backbone(format!(
                "missing weight file {}",
                weights.display()
            )));
        }
        let tokenizer = Tokenizer::from_file(dir.join("tokenizer.json"))
            .map_err(|e| Error::Backbone(format!("loading tokenizer: {e}")))?;
        // SAFETY: the weight file is treated as read-only for the lifetime of the mapping.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, &Device::Cpu)? };
        let mut bb = Self::from_var_builder(vb, config, Some(tokenizer))?;
        bb.id = format!("clip({})", dir.display());
        Ok(bb)
    }

    /// Builds the encoders from an arbitrary variable source (used with
    /// randomly initialised tiny configurations in tests).
    pub fn from_var_builder(vb: VarBuilder, config: ClipConfig, tokenizer: Option<Tokenizer>) -> Result<Self> {
        let vision = VisionTower::new(vb.pp("vision_model"), &config.vision)?;
        let text = TextTower::new(vb.pp("text_model"), &config.text)?;
        let visual_projection = linear_no_bias(config.vision.hidden, config.projection_dim, vb.pp("visual_projection"))?;
        let text_projection = linear_no_bias(config.text.hidden, config.projection_dim, vb.pp("text_projection"))?;
        Ok(Self {
            vision,
            visual_projection,
            text,
            text_projection,
            tokenizer,
            id: "clip(in-memory)".into(),
            config,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    /// Resizes to the native resolution and applies CLIP normalisation.
    fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        check_image_batch(images)?;
        let s = self.config.vision.image_size;
        let x = resize_bilinear(&images.to_dtype(DType::F32)?, s, s)?;
        let mean = Tensor::new(&IMAGE_MEAN.map(|v| v as f32), x.device())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGE_STD.map(|v| v as f32), x.device())?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Text embeddings from already tokenised prompts.
    pub fn embed_token_ids(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(ids.len());
        for seq in ids {
            if seq.is_empty() || seq.len() > self.config.text.max_positions {
                return Err(Error::Validation(format!(
                    "token sequence length {} outside 1..={}",
                    seq.len(),
                    self.config.text.max_positions
                )));
            }
            let pooled = self.text.forward(seq)?.unsqueeze(0)?;
            rows.push(self.text_projection.forward(&pooled)?);
        }
        Ok(Tensor::cat(&rows, 0)?)
    }
}

impl Backbone for ClipBackbone {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed_dim(&self) -> usize {
        self.config.projection_dim
    }

    fn grid(&self) -> (usize, usize) {
        (self.config.grid(), self.config.grid())
    }

    fn patch_tokens(&self, images: &Tensor) -> Result<Tensor> {
        let hidden = self.vision.forward(&self.preprocess(images)?)?;
        let g = self.config.grid();
        let tokens = hidden.narrow(1, 1, g * g)?;
        Ok(self.visual_projection.forward(&tokens)?.to_dtype(images.dtype())?)
    }

    fn image_embeddings(&self, images: &Tensor) -> Result<Tensor> {
        let hidden = self.vision.forward(&self.preprocess(images)?)?;
        let cls = hidden.i((.., 0))?;
        Ok(self.visual_projection.forward(&cls)?.to_dtype(images.dtype())?)
    }

    fn text_embeddings(&self, prompts: &[&str]) -> Result<Tensor> {
        let tok = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| Error::Backbone("backbone was built without a tokenizer".into()))?;
        let mut ids = Vec::with_capacity(prompts.len());
        for p in prompts {
            if p.is_empty() {
                return Err(Error::Validation("empty prompt string".into()));
            }
            let enc = tok
                .encode(*p, true)
                .map_err(|e| Error::Backbone(format!("tokenizing {p:?}: {e}")))?;
            let mut seq = enc.get_ids().to_vec();
            seq.truncate(self.config.text.max_positions);
            ids.push(seq);
        }
        let e = self.embed_token_ids(&ids)?;
        debug_assert_eq!(e.dim(D::Minus1)?, self.config.projection_dim);
        Ok(e)
    }
}
