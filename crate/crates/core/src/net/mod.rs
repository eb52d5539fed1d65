//! The restoration network and its building blocks.

pub mod block;
mod kernels;
pub mod layers;
mod params;
mod unet;

pub use block::{ChannelAttention, GatedFeedForward, Modulation, TransformerBlock};
pub use layers::{pixel_shuffle, pixel_unshuffle, ChannelLayerNorm, Conv3x3, Depthwise3x3, Pointwise};
pub use params::ParamStore;
pub use unet::{DapLedNet, Downsample, FeatureMap, NetOutput, NetworkConfig, Upsample};
