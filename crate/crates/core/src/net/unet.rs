use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::block::TransformerBlock;
use super::layers::{pixel_shuffle, pixel_unshuffle, Conv3x3, Pointwise};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::fusion::{apply_weights, LEVELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Channel width `C` at level 1; level `k` uses `C·2^(k-1)`.
    pub base_channels: usize,
    pub blocks_per_level: [usize; LEVELS],
    pub heads_per_level: [usize; LEVELS],
    pub ffn_expansion: f64,
    /// Enables the heatmap modulation branch of the decoder blocks.
    pub modulation: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            blocks_per_level: [1, 2, 2, 4],
            heads_per_level: [1, 2, 4, 8],
            ffn_expansion: 2.66,
            modulation: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 4 || c % 2 != 0 {
            return Err(Error::config(format!(
                "base_channels must be even and at least 4, got {c}"
            )));
        }
        if self.blocks_per_level.iter().any(|&b| b == 0) {
            return Err(Error::config("every level needs at least one block"));
        }
        for (k, &h) in self.heads_per_level.iter().enumerate() {
            let ch = self.channels(k);
            if h == 0 || ch % h != 0 {
                return Err(Error::config(format!(
                    "level {} has {ch} channels, not divisible by {h} heads",
                    k + 1
                )));
            }
        }
        if !(self.ffn_expansion > 0.0) {
            return Err(Error::config("ffn_expansion must be positive"));
        }
        Ok(())
    }

    /// Channels at zero-based level `k`.
    pub fn channels(&self, k: usize) -> usize {
        self.base_channels << k
    }
}

/// Activations at one network level (1-based).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub level: usize,
}

impl FeatureMap {
    /// `(height, width, channels)` of the first batch element.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        let (_, c, h, w) = self.tensor.dims4()?;
        Ok((h, w, c))
    }
}

/// Halves the resolution and doubles the channels: a bias-free 1×1
/// projection to `c/2` channels followed by 2× pixel-unshuffle.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub proj: Pointwise,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Pointwise::new(store, &format!("{name}.proj"), channels, channels / 2)?,
        })
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        Ok(FeatureMap {
            tensor: pixel_unshuffle(&self.proj.forward(&f.tensor)?)?,
            level: f.level + 1,
        })
    }
}

/// Doubles the resolution and halves the channels: a 1×1 projection to
/// `2c` channels followed by 2× pixel-shuffle.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub proj: Pointwise,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Pointwise::new(store, &format!("{name}.proj"), channels, channels * 2)?,
        })
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        Ok(FeatureMap {
            tensor: pixel_shuffle(&self.proj.forward(&f.tensor)?)?,
            level: f.level.saturating_sub(1),
        })
    }
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `input + residual`, not clamped.
    pub restored: Tensor,
    pub residual: Tensor,
    /// Level-4 features, `(N, 8C, H/8, W/8)`.
    pub latent: FeatureMap,
}

/// Four-level encoder-decoder restoring `Î = I + R`.
///
/// Levels 1–3 of the encoder use plain transformer blocks. The latent level
/// and every decoder level use heatmap-modulated blocks fed with the
/// matching pyramid level. Decoder levels fuse the skip connection by
/// concatenation followed by a 1×1 channel reduction.
pub struct DapLedNet {
    config: NetworkConfig,
    store: ParamStore,
    embed: Conv3x3,
    encoders: Vec<Vec<TransformerBlock>>,
    downs: Vec<Downsample>,
    latent: Vec<TransformerBlock>,
    ups: Vec<Upsample>,
    reduces: Vec<Pointwise>,
    /// Indexed by zero-based level (0..3), applied from deepest to shallowest.
    decoders: Vec<Vec<TransformerBlock>>,
    output: Conv3x3,
}

impl DapLedNet {
    pub fn new(config: NetworkConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let cfg = &config;
        let block = |store: &mut ParamStore, name: String, k: usize, modulated: bool| {
            TransformerBlock::new(
                store,
                &name,
                cfg.channels(k),
                cfg.heads_per_level[k],
                cfg.ffn_expansion,
                modulated && cfg.modulation,
            )
        };

        let embed = Conv3x3::new(&mut store, "embed", 3, config.base_channels, true)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for k in 0..LEVELS - 1 {
            let blocks = (0..config.blocks_per_level[k])
                .map(|b| block(&mut store, format!("encoder{}.{b}", k + 1), k, false))
                .collect::<Result<Vec<_>>>()?;
            encoders.push(blocks);
            downs.push(Downsample::new(&mut store, &format!("down{}", k + 1), config.channels(k))?);
        }
        let latent = (0..config.blocks_per_level[LEVELS - 1])
            .map(|b| block(&mut store, format!("latent.{b}"), LEVELS - 1, true))
            .collect::<Result<Vec<_>>>()?;

        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for k in 0..LEVELS - 1 {
            ups.push(Upsample::new(&mut store, &format!("up{}", k + 2), config.channels(k + 1))?);
            reduces.push(Pointwise::new(
                &mut store,
                &format!("reduce{}", k + 1),
                2 * config.channels(k),
                config.channels(k),
            )?);
            let blocks = (0..config.blocks_per_level[k])
                .map(|b| block(&mut store, format!("decoder{}.{b}", k + 1), k, true))
                .collect::<Result<Vec<_>>>()?;
            decoders.push(blocks);
        }
        let output = Conv3x3::zeros(&mut store, "output", config.base_channels, 3)?;
        Ok(Self {
            config,
            store,
            embed,
            encoders,
            downs,
            latent,
            ups,
            reduces,
            decoders,
            output,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// 3×3 convolution to `C` channels; the input sides must be multiples of 8.
    pub fn shallow_embed(&self, image: &Tensor) -> Result<FeatureMap> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not padded to a multiple of 8"
            )));
        }
        Ok(FeatureMap {
            tensor: self.embed.forward(image)?,
            level: 1,
        })
    }

    /// Runs the network on `(N, 3, H, W)` images with per-level `(N|1, 1, h_k, w_k)` weights.
    pub fn forward(&self, image: &Tensor, weights: &[Tensor]) -> Result<NetOutput> {
        let f_in = self.shallow_embed(image)?;
        let (_, _, h, w) = image.dims4()?;
        if weights.len() != LEVELS {
            return Err(Error::shape(format!(
                "expected {LEVELS} heatmap levels, got {}",
                weights.len()
            )));
        }
        for (k, wt) in weights.iter().enumerate() {
            let (_, _, wh, ww) = wt.dims4()?;
            if (wh, ww) != (h >> k, w >> k) {
                return Err(Error::shape(format!(
                    "heatmap level {} is {wh}x{ww}, expected {}x{}",
                    k + 1,
                    h >> k,
                    w >> k
                )));
            }
        }

        let mut x = FeatureMap {
            tensor: apply_weights(&f_in.tensor, &weights[0])?,
            level: 1,
        };
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for k in 0..LEVELS - 1 {
            for b in &self.encoders[k] {
                x.tensor = b.forward(&x.tensor, None)?;
            }
            skips.push(x.clone());
            x = self.downs[k].forward(&x)?;
        }
        for b in &self.latent {
            x.tensor = b.forward(&x.tensor, Some(&weights[LEVELS - 1]))?;
        }
        let latent = x.clone();

        for k in (0..LEVELS - 1).rev() {
            let up = self.ups[k].forward(&x)?;
            let merged = Tensor::cat(&[&up.tensor, &skips[k].tensor], 1)?;
            let mut t = self.reduces[k].forward(&merged)?;
            for b in &self.decoders[k] {
                t = b.forward(&t, Some(&weights[k]))?;
            }
            x = FeatureMap {
                tensor: t,
                level: k + 1,
            };
        }
        let residual = self.output.forward(&x.tensor)?;
        let restored = (image + &residual)?;
        Ok(NetOutput {
            restored,
            residual,
            latent,
        })
    }

    /// Every modulated block, in registration order.
    pub fn modulated_blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.latent
            .iter()
            .chain(self.decoders.iter().flatten())
            .filter(|b| b.modulation.is_some())
    }
}
