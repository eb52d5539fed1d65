//! Image files, the portable array format and heatmap overlays.
//!
//! # Array file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size        | content                              |
//! |--------|-------------|--------------------------------------|
//! | 0      | 8           | magic `DAPLEDA1`                     |
//! | 8      | 4           | `u32` number of dimensions `n`       |
//! | 12     | 8·n         | `u64` extent of each dimension       |
//! | 12+8n  | 4·∏extents  | `f32` values, row-major (last fastest) |

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::resize::resize_plane;

pub const ARRAY_MAGIC: &[u8; 8] = b"DAPLEDA1";

/// Decodes any supported raster into RGB `[0, 1]` by dividing by 255.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Quantises to 8-bit (clamp, round) and writes a PNG.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit round trip, as an image passes through a PNG file.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    let data = img.data().iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
    ImageTensor::new(img.height(), img.width(), data).expect("same shape")
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "ppm"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn write_array(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != values.len() {
        return Err(Error::shape(format!(
            "array of {} values does not match dims {dims:?}",
            values.len()
        )));
    }
    let mut buf = Vec::with_capacity(12 + 8 * dims.len() + 4 * values.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
    if buf.len() < 12 || &buf[..8] != ARRAY_MAGIC {
        return Err(bad("not an array file"));
    }
    let n = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let header = 12 + 8 * n;
    if buf.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..n)
        .map(|i| u64::from_le_bytes(buf[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if buf.len() != header + 4 * count {
        return Err(bad("payload size does not match dimensions"));
    }
    let values = buf[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, values))
}

/// Piecewise-linear "jet" colour map on `[0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Blends a false-colour rendering of `plane` (`rows × cols`, values in
/// `[0, 1]`) over the image; the plane is bilinearly resized to fit.
pub fn heatmap_overlay(image: &ImageTensor, plane: &[f32], rows: usize, cols: usize, alpha: f32) -> Result<ImageTensor> {
    if plane.len() != rows * cols {
        return Err(Error::shape("heatmap plane size mismatch"));
    }
    let (h, w) = (image.height(), image.width());
    let up = resize_plane(plane, rows, cols, h, w);
    Ok(ImageTensor::from_fn(h, w, |y, x, c| {
        let col = jet(up[y * w + x]);
        (1.0 - alpha) * image.get(y, x, c) + alpha * col[c]
    }))
}

/// Places images side by side (all must share a height).
pub fn side_by_side(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let h = images.first().map(|i| i.height()).unwrap_or(0);
    if images.is_empty() || images.iter().any(|i| i.height() != h) {
        return Err(Error::shape("side-by-side images need equal heights"));
    }
    let total_w: usize = images.iter().map(|i| i.width()).sum();
    let offsets: Vec<usize> = images
        .iter()
        .scan(0, |acc, i| {
            let o = *acc;
            *acc += i.width();
            Some(o)
        })
        .collect();
    Ok(ImageTensor::from_fn(h, total_w, |y, x, c| {
        let k = offsets.iter().rposition(|&o| o <= x).expect("x within total width");
        images[k].get(y, x - offsets[k], c)
    }))
}
