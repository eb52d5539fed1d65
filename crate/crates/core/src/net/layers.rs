//! Convolution and normalisation layers on `(N, C, H, W)` tensors.

use candle_core::{Tensor, D};

use super::kernels::{channel_layer_norm, depthwise3x3};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let fan_in = cin * 9;
        Ok(Self {
            weight: store.fan_in_uniform(&format!("{name}.weight"), &[cout, cin, 3, 3], fan_in)?,
            bias: if bias {
                Some(store.fan_in_uniform(&format!("{name}.bias"), &[cout], fan_in)?)
            } else {
                None
            },
        })
    }

    /// Zero-initialised weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.zeros(&format!("{name}.weight"), &[cout, cin, 3, 3])?,
            bias: Some(store.zeros(&format!("{name}.bias"), &[cout])?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, 1, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Bias-free 1×1 convolution, computed as a matrix product.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: Tensor,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.fan_in_uniform(&format!("{name}.weight"), &[cout, cin], cin)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (cout, cin) = self.weight.dims2()?;
        if c != cin {
            return Err(Error::shape(format!("pointwise layer expects {cin} channels, got {c}")));
        }
        let y = self.weight.broadcast_matmul(&x.reshape((n, c, h * w))?)?;
        Ok(y.reshape((n, cout, h, w))?)
    }
}

/// Bias-free depthwise 3×3 convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Depthwise3x3 {
    /// `(C, 9)`, taps in row-major order.
    pub weight: Tensor,
}

impl Depthwise3x3 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.fan_in_uniform(&format!("{name}.weight"), &[channels, 9], 9)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if self.weight.dim(0)? != c {
            return Err(Error::shape(format!(
                "depthwise layer expects {} channels, got {c}",
                self.weight.dim(0)?
            )));
        }
        Ok(depthwise3x3(x, &self.weight)?)
    }
}

/// Layer normalisation across channels at every pixel, with affine terms.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ChannelLayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.ones(&format!("{name}.weight"), &[channels])?,
            bias: store.zeros(&format!("{name}.bias"), &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(channel_layer_norm(x, &self.weight, &self.bias, Self::EPS)?)
    }
}

/// `(N, C, H, W) → (N, 4C, H/2, W/2)`.
pub fn pixel_unshuffle(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("cannot unshuffle odd spatial size {h}x{w}")));
    }
    Ok(candle_nn::ops::pixel_unshuffle(x, 2)?)
}

/// `(N, 4C, H, W) → (N, C, 2H, 2W)`.
pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c % 4 != 0 {
        return Err(Error::shape(format!("cannot shuffle {c} channels by 2")));
    }
    Ok(candle_nn::ops::pixel_shuffle(x, 2)?)
}

/// L2 normalisation along the last axis with a small stabiliser.
pub(crate) fn normalize_last(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}
