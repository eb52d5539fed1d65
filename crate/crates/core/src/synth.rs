//! Synthetic paired night-blur data.
//!
//! A sharp image is blurred with a linear motion kernel, darkened with a
//! gamma curve and a gain, then corrupted with Gaussian sensor noise:
//!
//! ```text
//! degraded = clip(gain · blur(sharp)^gamma + noise, 0, 1)
//! ```
//!
//! Sample `i` of a corpus generated with seed `s` draws its parameters from
//! `ChaCha8Rng::seed_from_u64(s)` on stream `i`, in this order: `gamma`,
//! `gain`, `kernel_length`, `kernel_angle`, `noise_sigma`, `noise_seed`.
//! Samples are therefore independent of generation order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect, ImageTensor};
use crate::io::{list_images, load_image, save_image};

/// Parameter ranges sampled for each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRanges {
    pub gamma: (f64, f64),
    pub gain: (f64, f64),
    /// Inclusive range of kernel lengths before forcing them odd.
    pub kernel_length: (usize, usize),
    pub noise_sigma: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            gamma: (1.5, 3.5),
            gain: (0.3, 0.7),
            kernel_length: (5, 25),
            noise_sigma: (0.005, 0.02),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub gamma: f64,
    pub gain: f64,
    pub kernel_length: usize,
    /// Radians, counter-clockwise from the +x axis.
    pub kernel_angle: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl DegradationParams {
    /// Parameters that leave an image untouched.
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            gain: 1.0,
            kernel_length: 1,
            kernel_angle: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Per-sample parameters for sample `index` of a corpus seeded with `seed`.
    pub fn sample(seed: u64, index: u64, ranges: &DegradationRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let gamma = rng.random_range(ranges.gamma.0..ranges.gamma.1);
        let gain = rng.random_range(ranges.gain.0..ranges.gain.1);
        let length = rng.random_range(ranges.kernel_length.0..=ranges.kernel_length.1);
        let kernel_angle = rng.random_range(0.0..std::f64::consts::PI);
        let noise_sigma = rng.random_range(ranges.noise_sigma.0..ranges.noise_sigma.1);
        let noise_seed = rng.random::<u64>();
        Self {
            gamma,
            gain,
            kernel_length: length | 1,
            kernel_angle,
            noise_sigma,
            noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::Validation(format!("gamma {} < 1", self.gamma)));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::Validation(format!("gain {} outside (0, 1]", self.gain)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation("negative noise sigma".into()));
        }
        if self.kernel_length == 0 {
            return Err(Error::Validation("kernel length must be at least 1".into()));
        }
        Ok(())
    }
}

/// A square, non-negative kernel summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    /// Row-major `size × size`.
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Linear motion kernel of the given length (made odd) and angle.
///
/// The segment through the kernel centre is sampled densely and each
/// sample is splatted bilinearly onto the grid, then the grid is normalised.
pub fn make_blur_kernel(length: usize, angle: f64) -> Result<BlurKernel> {
    if length == 0 {
        return Err(Error::Validation("blur kernel length must be at least 1".into()));
    }
    let size = length | 1;
    if size == 1 {
        return Ok(BlurKernel {
            size,
            weights: vec![1.0],
        });
    }
    let c = (size - 1) as f64 / 2.0;
    let (dx, dy) = (angle.cos(), -angle.sin());
    let samples = 32 * size;
    let mut w = vec![0.0f64; size * size];
    let max = (size - 1) as f64;
    for s in 0..samples {
        let t = -c + (size - 1) as f64 * (s as f64 + 0.5) / samples as f64;
        let x = (c + t * dx).clamp(0.0, max);
        let y = (c + t * dy).clamp(0.0, max);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        w[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
        w[y0 * size + x1] += fx * (1.0 - fy);
        w[y1 * size + x0] += (1.0 - fx) * fy;
        w[y1 * size + x1] += fx * fy;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(BlurKernel { size, weights: w })
}

/// Correlates every channel with the kernel using symmetric reflection at
/// the borders.
pub fn blur(image: &ImageTensor, kernel: &BlurKernel) -> ImageTensor {
    if kernel.size == 1 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let r = (kernel.size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..kernel.size)
        .flat_map(|i| (0..kernel.size).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let k = kernel.at(i, j);
            (k != 0.0).then_some((i as isize - r, j as isize - r, k))
        })
        .collect();
    let idx = |v: isize, n: usize| -> usize { reflect(v.rem_euclid(2 * n as isize) as usize, n) };
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for &(dy, dx, k) in &taps {
                let sy = idx(y as isize + dy, h);
                let sx = idx(x as isize + dx, w);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += k * image.get(sy, sx, c) as f64;
                }
            }
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = acc[c] as f32;
            }
        }
    }
    ImageTensor::new(h, w, out).expect("same shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub degraded: ImageTensor,
    pub sharp: ImageTensor,
    pub params: DegradationParams,
}

/// Applies blur, gamma darkening, gain and noise.
pub fn degrade(sharp: &ImageTensor, params: &DegradationParams) -> Result<ImageTensor> {
    sharp.validate()?;
    params.validate()?;
    let kernel = make_blur_kernel(params.kernel_length, params.kernel_angle)?;
    let blurred = blur(sharp, &kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Validation(e.to_string()))?)
    } else {
        None
    };
    let data = blurred
        .data()
        .iter()
        .map(|&v| {
            let dark = params.gain * (v as f64).max(0.0).powf(params.gamma);
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (dark + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageTensor::new(sharp.height(), sharp.width(), data)
}

/// Pairs `count` degraded images with their sources (`sources[i % len]`).
pub fn synthesize_pairs(
    sources: &[ImageTensor],
    count: usize,
    seed: u64,
    ranges: &DegradationRanges,
) -> Result<Vec<PairedSample>> {
    if sources.is_empty() && count > 0 {
        return Err(Error::Validation("no source images".into()));
    }
    (0..count)
        .map(|i| {
            let sharp = sources[i % sources.len()].clone();
            let params = DegradationParams::sample(seed, i as u64, ranges);
            let degraded = degrade(&sharp, &params)?;
            Ok(PairedSample {
                id: format!("{i:05}"),
                degraded,
                sharp,
                params,
            })
        })
        .collect()
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub source: String,
    pub degraded: String,
    pub sharp: String,
    pub seed: u64,
    pub index: u64,
    pub params: DegradationParams,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `count` pairs under `out_dir/{degraded,sharp}/` and a manifest.
pub fn generate_corpus(
    source_dir: &Path,
    out_dir: &Path,
    count: usize,
    seed: u64,
    ranges: &DegradationRanges,
) -> Result<Vec<ManifestRecord>> {
    let sources = list_images(source_dir)?;
    if sources.is_empty() {
        return Err(Error::Validation(format!(
            "source directory {} contains no images",
            source_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(count);
    if count > 0 {
        for sub in ["degraded", "sharp"] {
            let d = out_dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut loaded: Vec<Option<ImageTensor>> = vec![None; sources.len()];
    for i in 0..count {
        let si = i % sources.len();
        if loaded[si].is_none() {
            loaded[si] = Some(load_image(&sources[si])?);
        }
        let sharp = loaded[si].as_ref().expect("loaded above");
        let params = DegradationParams::sample(seed, i as u64, ranges);
        let degraded = degrade(sharp, &params)?;
        let id = format!("{i:05}");
        let rec = ManifestRecord {
            degraded: format!("degraded/{id}.png"),
            sharp: format!("sharp/{id}.png"),
            source: sources[si]
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            id,
            seed,
            index: i as u64,
            params,
        };
        save_image(&degraded, &out_dir.join(&rec.degraded))?;
        save_image(sharp, &out_dir.join(&rec.sharp))?;
        records.push(rec);
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Loads every pair listed in `dir/manifest.jsonl`.
pub fn load_corpus(dir: &Path) -> Result<Vec<PairedSample>> {
    read_manifest(&dir.join(MANIFEST_NAME))?
        .into_iter()
        .map(|r| {
            Ok(PairedSample {
                degraded: load_image(&dir.join(&r.degraded))?,
                sharp: load_image(&dir.join(&r.sharp))?,
                id: r.id,
                params: r.params,
            })
        })
        .collect()
}

/// Procedural "sharp" scene: a colour gradient overlaid with rectangles,
/// discs and stripe patches, giving hard edges for the blur to act on.
pub fn procedural_scene(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f32; 3] {
        [
            rng.random_range(0.1..0.95),
            rng.random_range(0.1..0.95),
            rng.random_range(0.1..0.95),
        ]
    };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let mut img = ImageTensor::from_fn(height, width, |y, x, c| {
        let t = (y as f32 + 0.5 * x as f32) / (height as f32 + 0.5 * width as f32);
        top[c] * (1.0 - t) + bottom[c] * t
    });
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let kind = rng.random_range(0..3);
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let ry = rng.random_range(0.08..0.3) * height as f32;
        let rx = rng.random_range(0.08..0.3) * width as f32;
        let period = rng.random_range(2.0..6.0f32);
        for y in 0..height {
            for x in 0..width {
                let (fy, fx) = (y as f32 - cy, x as f32 - cx);
                let inside = match kind {
                    0 => fy.abs() <= ry && fx.abs() <= rx,
                    1 => (fy / ry).powi(2) + (fx / rx).powi(2) <= 1.0,
                    _ => fy.abs() <= ry && fx.abs() <= rx && ((x as f32 / period) as i64) % 2 == 0,
                };
                if inside {
                    for (c, &v) in col.iter().enumerate() {
                        img.set(y, x, c, v);
                    }
                }
            }
        }
    }
    img
}

/// Writes `count` procedural scenes as PNG files named `scene_XXXXX.png`.
pub fn write_scenes(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..count)
        .map(|i| {
            let p = out_dir.join(format!("scene_{i:05}.png"));
            save_image(&procedural_scene(seed.wrapping_add(i as u64), size, size), &p)?;
            Ok(p)
        })
        .collect()
}
