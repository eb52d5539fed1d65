//! Host-side RGB images with values in `[0, 1]`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An `H × W × 3` image stored row-major in interleaved (HWC) order.
///
/// Values are nominally in `[0, 1]`; [`ImageTensor::validate`] enforces it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::shape(format!(
                "buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Rejects NaN/infinite pixels and values outside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite pixel value at flat index {i}"
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "pixel value {} at flat index {i} outside [0, 1]",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Reflect-pads bottom and right edges so both dimensions become
    /// multiples of `multiple`. Returns the image unchanged if already aligned.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        if ph == self.height && pw == self.width {
            return self.clone();
        }
        Self::from_fn(ph, pw, |y, x, c| {
            self.get(reflect(y, self.height), reflect(x, self.width), c)
        })
    }

    /// `(1, 3, H, W)` tensor in the requested dtype.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::shape(format!(
                    "expected (3,H,W) or (1,3,H,W), got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }
}

/// Half-sample symmetric reflection index (`... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...`).
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Stacks images of identical size into an `(N, 3, H, W)` tensor.
pub fn stack_images(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
    let mut ts = Vec::with_capacity(images.len());
    for img in images {
        if img.height() != first.height() || img.width() != first.width() {
            return Err(Error::shape("batch images differ in size"));
        }
        ts.push(img.to_tensor(device, dtype)?);
    }
    Ok(Tensor::cat(&ts, 0)?)
}
