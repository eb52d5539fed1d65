//! Full-reference quality metrics: PSNR and SSIM.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{list_images, load_image};

/// PSNR reported for identical images when a finite number is needed.
pub const PSNR_DISPLAY_CAP: f64 = 100.0;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(peak² / MSE)` in dB; `+∞` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub fn display_psnr(v: f64) -> f64 {
    v.min(PSNR_DISPLAY_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// ITU-R BT.601 luma.
pub fn luminance(img: &ImageTensor) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalised 1-D Gaussian of the given odd length.
pub fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained Gaussian windows of the luma channel.
pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, p: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < p.window || w < p.window {
        return Err(Error::shape(format!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    let la = luminance(a);
    let lb = luminance(b);
    let g = gaussian_window(p.window, p.sigma);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(&la, h, w, &g);
    let mu_b = filter_valid(&lb, h, w, &g);
    let e_aa = filter_valid(&prod(&la, &la), h, w, &g);
    let e_bb = filter_valid(&prod(&lb, &lb), h, w, &g);
    let e_ab = filter_valid(&prod(&la, &lb), h, w, &g);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    /// Mean of capped per-image PSNR values.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|m| display_psnr(m.psnr)).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
        Self {
            images,
            mean_psnr,
            mean_ssim,
        }
    }

    /// Evaluates aligned `(prediction, ground truth)` pairs.
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a ImageTensor, &'a ImageTensor)>) -> Result<Self> {
        let images = pairs
            .into_iter()
            .map(|(id, pred, gt)| {
                Ok(ImageMetrics {
                    psnr: psnr(pred, gt, 1.0)?,
                    ssim: ssim(pred, gt)?,
                    id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_images(images))
    }

    /// Tab-separated text: one row per image followed by a `mean` row.
    pub fn to_text(&self) -> String {
        let mut s = String::from("id\tpsnr_db\tssim\n");
        for m in &self.images {
            let _ = writeln!(s, "{}\t{:.4}\t{:.6}", m.id, display_psnr(m.psnr), m.ssim);
        }
        let _ = writeln!(s, "mean\t{:.4}\t{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Matches predictions to ground truth by file name.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = list_images(pred_dir)?;
    let mut pairs = Vec::new();
    for p in preds {
        let name = p.file_name().expect("listed files have names").to_owned();
        let gt = gt_dir.join(&name);
        if !gt.exists() {
            log::warn!("no ground truth for {}", p.display());
            continue;
        }
        pairs.push((name.to_string_lossy().into_owned(), load_image(&p)?, load_image(&gt)?));
    }
    if pairs.is_empty() {
        return Err(Error::Validation(format!(
            "no matching image pairs between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    MetricReport::evaluate(pairs.iter().map(|(id, a, b)| (id.clone(), a, b)))
}
