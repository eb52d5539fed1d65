//! Inference: heatmap pyramid, network pass and pad/crop handling.

use candle_core::Device;

use crate::error::Result;
use crate::fusion::CrossFusion;
use crate::image::ImageTensor;
use crate::net::DapLedNet;

/// Restores one image of any size.
///
/// The image is reflect-padded to a multiple of 8, the heatmap pyramid is
/// computed on the padded image, and the output is cropped back to the input
/// size and clamped to `[0, 1]`.
pub fn restore_image(net: &DapLedNet, fusion: &CrossFusion, image: &ImageTensor) -> Result<ImageTensor> {
    image.validate()?;
    let padded = image.pad_to_multiple(8);
    let pyramid = fusion.pyramid(&padded)?;
    let weights = pyramid.weight_tensors(&Device::Cpu, net.dtype())?;
    let x = padded.to_tensor(&Device::Cpu, net.dtype())?;
    let out = net.forward(&x, &weights)?;
    let restored = ImageTensor::from_tensor(&out.restored)?;
    Ok(restored.crop(0, 0, image.height(), image.width())?.clamped())
}
