//! Transformer blocks with transposed (channel-wise) attention.
//!
//! A block computes
//!
//! ```text
//! F̂   = F + Modulation(w)              (only when modulation is enabled)
//! F'  = F + Attn(Wq F̂', Wk F̂', Wv F̂')  with F̂' = LayerNorm(F̂)
//! out = F' + FeedForward(LayerNorm(F'))
//! ```
//!
//! Note the attention residual adds the unmodulated input `F`. With
//! modulation enabled the block is the CLIP-enhanced transformer block
//! used in the decoder; without it, the plain encoder block.

use candle_core::{Tensor, D};

use super::layers::{normalize_last, ChannelLayerNorm, Depthwise3x3, Pointwise};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Multi-head attention across channels (attention maps are `c × c` per head).
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub heads: usize,
    pub temperature: Tensor,
    pub qkv: Pointwise,
    pub qkv_dw: Depthwise3x3,
    pub project_out: Pointwise,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            temperature: store.ones(&format!("{name}.temperature"), &[heads])?,
            qkv: Pointwise::new(store, &format!("{name}.qkv"), channels, 3 * channels)?,
            qkv_dw: Depthwise3x3::new(store, &format!("{name}.qkv_dw"), 3 * channels)?,
            project_out: Pointwise::new(store, &format!("{name}.project_out"), channels, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let per_head = c / self.heads;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(1, i * c, c)?
                .reshape((n, self.heads, per_head, h * w))?)
        };
        let q = normalize_last(&split(0)?)?;
        let k = normalize_last(&split(1)?)?;
        let v = split(2)?;
        let logits = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .broadcast_mul(&self.temperature.reshape((1, self.heads, 1, 1))?)?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = attn.matmul(&v.contiguous()?)?.reshape((n, c, h, w))?;
        self.project_out.forward(&out)
    }
}

/// Gated feed-forward with a depthwise convolution in the hidden layer.
#[derive(Debug, Clone)]
pub struct GatedFeedForward {
    pub hidden: usize,
    pub project_in: Pointwise,
    pub dw: Depthwise3x3,
    pub project_out: Pointwise,
}

impl GatedFeedForward {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, expansion: f64) -> Result<Self> {
        let hidden = ((channels as f64) * expansion) as usize;
        if hidden == 0 {
            return Err(Error::config("feed-forward hidden width is zero"));
        }
        Ok(Self {
            hidden,
            project_in: Pointwise::new(store, &format!("{name}.project_in"), channels, 2 * hidden)?,
            dw: Depthwise3x3::new(store, &format!("{name}.dw"), 2 * hidden)?,
            project_out: Pointwise::new(store, &format!("{name}.project_out"), hidden, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(&self.project_in.forward(x)?)?;
        let gate = y.narrow(1, 0, self.hidden)?.gelu_erf()?;
        let value = y.narrow(1, self.hidden, self.hidden)?;
        self.project_out.forward(&(gate * value)?)
    }
}

/// Bias-free 1×1 projection of the single-channel heatmap to `c` channels.
#[derive(Debug, Clone)]
pub struct Modulation {
    /// `(c,)`, zero-initialised.
    pub weight: Tensor,
}

impl Modulation {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.zeros(&format!("{name}.weight"), &[channels])?,
        })
    }

    /// `(N, 1, h, w) → (N, c, h, w)`.
    pub fn forward(&self, heatmap: &Tensor) -> Result<Tensor> {
        Ok(heatmap.broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: ChannelLayerNorm,
    pub attn: ChannelAttention,
    pub norm2: ChannelLayerNorm,
    pub ffn: GatedFeedForward,
    pub modulation: Option<Modulation>,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: f64,
        modulated: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: ChannelLayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            attn: ChannelAttention::new(store, &format!("{name}.attn"), channels, heads)?,
            norm2: ChannelLayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            ffn: GatedFeedForward::new(store, &format!("{name}.ffn"), channels, expansion)?,
            modulation: if modulated {
                Some(Modulation::new(store, &format!("{name}.modulation"), channels)?)
            } else {
                None
            },
        })
    }

    /// `heatmap` is `(N, 1, h, w)` at the block's resolution; it is ignored
    /// by blocks without modulation.
    pub fn forward(&self, x: &Tensor, heatmap: Option<&Tensor>) -> Result<Tensor> {
        let modulated = match (&self.modulation, heatmap) {
            (Some(m), Some(hm)) => {
                let (_, _, h, w) = x.dims4()?;
                let (_, _, hh, hw) = hm.dims4()?;
                if (h, w) != (hh, hw) {
                    return Err(Error::shape(format!(
                        "heatmap {hh}x{hw} does not match features {h}x{w}"
                    )));
                }
                Some((x + m.forward(hm)?)?)
            }
            _ => None,
        };
        let attn_in = self.norm1.forward(modulated.as_ref().unwrap_or(x))?;
        let y = (x + self.attn.forward(&attn_in)?)?;
        Ok((&y + self.ffn.forward(&self.norm2.forward(&y)?)?)?)
    }

    /// Same block with the modulation branch removed (shares all weights).
    pub fn without_modulation(&self) -> Self {
        Self {
            modulation: None,
            ..self.clone()
        }
    }
}
