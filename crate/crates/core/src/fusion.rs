//! Cross-fusion of image patches with degradation prompts.
//!
//! Patch tokens of the input image are compared with the prompt embeddings
//! by cosine similarity, squashed into `[0, 1]` with a temperature-scaled
//! sigmoid and resampled into a four-level pyramid whose levels match the
//! resolutions of the restoration network. The level-1 map weights the
//! shallow features (`F_weight = F_in ⊙ w`); all levels feed the decoder's
//! modulation branches.
//!
//! With several prompts the per-prompt maps are kept for inspection and
//! averaged into a single weighting channel.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::backbone::{encode_image_patches, Backbone, PatchEmbeddingGrid, PromptSet};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::resize::{avg_pool2_plane, resize_plane};

/// Number of pyramid levels, one per network level.
pub const LEVELS: usize = 4;

/// Default sigmoid temperature for heatmap normalisation.
pub const DEFAULT_TEMPERATURE: f64 = 10.0;

/// A `rows × cols × P` grid of per-patch, per-prompt values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub rows: usize,
    pub cols: usize,
    pub prompts: usize,
    /// Row-major `(row, col, prompt)`.
    pub values: Vec<f32>,
}

impl HeatmapGrid {
    pub fn new(rows: usize, cols: usize, prompts: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols * prompts {
            return Err(Error::shape(format!(
                "heatmap buffer has {} values, expected {rows}x{cols}x{prompts}",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            prompts,
            values,
        })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, p: usize) -> f32 {
        self.values[(i * self.cols + j) * self.prompts + p]
    }

    /// The `rows × cols` plane of prompt `p`.
    pub fn plane(&self, p: usize) -> Vec<f32> {
        self.values.iter().skip(p).step_by(self.prompts).copied().collect()
    }

    fn from_planes(rows: usize, cols: usize, planes: &[Vec<f32>]) -> Self {
        let prompts = planes.len();
        let mut values = vec![0.0; rows * cols * prompts];
        for (p, plane) in planes.iter().enumerate() {
            for (k, &v) in plane.iter().enumerate() {
                values[k * prompts + p] = v;
            }
        }
        Self {
            rows,
            cols,
            prompts,
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }
}

/// Cosine similarity of every patch with every prompt, `(g_h, g_w, P)`.
pub fn compute_raw_heatmap(patches: &PatchEmbeddingGrid, prompt_embeds: &Tensor) -> Result<HeatmapGrid> {
    let (p, d) = prompt_embeds.dims2()?;
    if d != patches.dim() {
        return Err(Error::shape(format!(
            "patch dimension {} does not match prompt dimension {d}",
            patches.dim()
        )));
    }
    let n = patches.grid_h() * patches.grid_w();
    let pt = Tensor::from_slice(patches.data(), (n, d), &Device::Cpu)?.to_dtype(DType::F64)?;
    let tt = prompt_embeds.to_device(&Device::Cpu)?.to_dtype(DType::F64)?;
    let pn = row_norms(&pt)?;
    let tn = row_norms(&tt)?;
    if pn.iter().chain(&tn).any(|&v| v == 0.0) {
        return Err(Error::Numeric("zero-norm embedding in heatmap".into()));
    }
    let pn = Tensor::from_slice(&pn, (n, 1), &Device::Cpu)?;
    let tn = Tensor::from_slice(&tn, (p, 1), &Device::Cpu)?;
    let sim = pt
        .broadcast_div(&pn)?
        .matmul(&tt.broadcast_div(&tn)?.t()?)?
        .clamp(-1.0, 1.0)?;
    let values: Vec<f32> = sim.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    HeatmapGrid::new(patches.grid_h(), patches.grid_w(), p, values)
}

fn row_norms(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.sqr()?.sum(1)?.sqrt()?.to_vec1()?)
}

/// A raw grid together with its `[0, 1]` normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHeatmap {
    pub raw: HeatmapGrid,
    pub normalized: HeatmapGrid,
    pub temperature: f64,
}

/// Elementwise `sigmoid(temperature · raw)`.
pub fn normalize_heatmap(raw: &HeatmapGrid, temperature: f64) -> Result<NormalizedHeatmap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "heatmap temperature must be positive, got {temperature}"
        )));
    }
    let values = raw
        .values
        .iter()
        .map(|&r| (1.0 / (1.0 + (-temperature * r as f64).exp())) as f32)
        .collect();
    Ok(NormalizedHeatmap {
        raw: raw.clone(),
        normalized: HeatmapGrid {
            values,
            ..raw.clone()
        },
        temperature,
    })
}

/// Per-prompt weights at one spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationHeatmap {
    /// `height × width × P`, values in `[0, 1]`.
    pub map: HeatmapGrid,
    /// The raw `g_h × g_w × P` cosine grid the map was derived from.
    pub source_grid: HeatmapGrid,
}

impl DegradationHeatmap {
    pub fn height(&self) -> usize {
        self.map.rows
    }

    pub fn width(&self) -> usize {
        self.map.cols
    }

    /// Single weighting channel: the mean over prompts.
    pub fn weights(&self) -> Vec<f32> {
        let p = self.map.prompts;
        self.map
            .values
            .chunks(p)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / p as f64) as f32)
            .collect()
    }

    /// `(1, 1, height, width)` weighting tensor.
    pub fn weight_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.weights(), (1, 1, self.height(), self.width()), device)?.to_dtype(dtype)?)
    }

    /// A constant single-prompt map, mostly useful for tests and ablations.
    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            map: HeatmapGrid {
                rows: height,
                cols: width,
                prompts: 1,
                values: vec![value; height * width],
            },
            source_grid: HeatmapGrid {
                rows: 1,
                cols: 1,
                prompts: 1,
                values: vec![0.0],
            },
        }
    }
}

/// Heatmaps at full, half, quarter and eighth resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapPyramid {
    levels: Vec<DegradationHeatmap>,
}

impl HeatmapPyramid {
    pub fn levels(&self) -> &[DegradationHeatmap] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &DegradationHeatmap {
        &self.levels[k]
    }

    /// Pyramid of constant maps for an `h × w` input.
    pub fn constant(h: usize, w: usize, value: f32) -> Result<Self> {
        check_pyramid_dims(h, w)?;
        Ok(Self {
            levels: (0..LEVELS)
                .map(|k| DegradationHeatmap::constant(h >> k, w >> k, value))
                .collect(),
        })
    }

    /// Input size this pyramid was built for.
    pub fn input_size(&self) -> (usize, usize) {
        (self.levels[0].height(), self.levels[0].width())
    }

    /// Per-level `(1, 1, h_k, w_k)` weight tensors.
    pub fn weight_tensors(&self, device: &Device, dtype: DType) -> Result<Vec<Tensor>> {
        self.levels.iter().map(|l| l.weight_tensor(device, dtype)).collect()
    }

    /// Batches equally sized pyramids into per-level `(N, 1, h_k, w_k)` tensors.
    pub fn batch(pyramids: &[&HeatmapPyramid], device: &Device, dtype: DType) -> Result<Vec<Tensor>> {
        let first = pyramids
            .first()
            .ok_or_else(|| Error::shape("empty pyramid batch"))?;
        if pyramids.iter().any(|p| p.input_size() != first.input_size()) {
            return Err(Error::shape("pyramids in a batch differ in size"));
        }
        let mut out = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            let ts = pyramids
                .iter()
                .map(|p| p.levels[k].weight_tensor(device, dtype))
                .collect::<Result<Vec<_>>>()?;
            out.push(Tensor::cat(&ts, 0)?);
        }
        Ok(out)
    }
}

fn check_pyramid_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::shape(format!(
            "pyramid input {h}x{w} must be a positive multiple of 8; pad the image first"
        )));
    }
    Ok(())
}

/// Level 1 is the grid bilinearly resized to `input_h × input_w`; each
/// further level is a 2×2 average pool of the previous one.
pub fn build_pyramid(heatmap: &NormalizedHeatmap, input_h: usize, input_w: usize) -> Result<HeatmapPyramid> {
    check_pyramid_dims(input_h, input_w)?;
    let grid = &heatmap.normalized;
    let mut planes: Vec<Vec<f32>> = (0..grid.prompts)
        .map(|p| resize_plane(&grid.plane(p), grid.rows, grid.cols, input_h, input_w))
        .collect();
    let (mut h, mut w) = (input_h, input_w);
    let mut levels = Vec::with_capacity(LEVELS);
    for k in 0..LEVELS {
        if k > 0 {
            planes = planes
                .iter()
                .map(|pl| avg_pool2_plane(pl, h, w))
                .collect::<Result<_>>()?;
            h /= 2;
            w /= 2;
        }
        levels.push(DegradationHeatmap {
            map: HeatmapGrid::from_planes(h, w, &planes),
            source_grid: heatmap.raw.clone(),
        });
    }
    Ok(HeatmapPyramid { levels })
}

/// `F_weight(x, y, c) = F_in(x, y, c) · w(x, y)` for `(N, C, h, w)` features
/// and `(N, 1, h, w)` weights.
pub fn apply_weights(f_in: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = f_in.dims4()?;
    let (wn, wc, wh, ww) = weights.dims4()?;
    if (wh, ww) != (h, w) || wc != 1 || (wn != n && wn != 1) {
        return Err(Error::shape(format!(
            "weights {:?} do not match features {:?}",
            weights.dims(),
            f_in.dims()
        )));
    }
    Ok(f_in.broadcast_mul(weights)?)
}

/// End-to-end heatmap computation for an image: backbone, prompts and
/// normalisation temperature bundled together.
#[derive(Clone)]
pub struct CrossFusion {
    backbone: Arc<dyn Backbone>,
    prompts: PromptSet,
    temperature: f64,
}

impl CrossFusion {
    pub fn new(backbone: Arc<dyn Backbone>, prompts: PromptSet, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config("heatmap temperature must be positive"));
        }
        Ok(Self {
            backbone,
            prompts,
            temperature,
        })
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn raw_heatmap(&self, image: &ImageTensor) -> Result<HeatmapGrid> {
        let patches = encode_image_patches(self.backbone.as_ref(), image)?;
        let text = self.prompts.embeddings(self.backbone.as_ref())?;
        compute_raw_heatmap(&patches, &text)
    }

    pub fn normalized_heatmap(&self, image: &ImageTensor) -> Result<NormalizedHeatmap> {
        normalize_heatmap(&self.raw_heatmap(image)?, self.temperature)
    }

    /// Pyramid for an image whose sides are already multiples of 8.
    pub fn pyramid(&self, image: &ImageTensor) -> Result<HeatmapPyramid> {
        check_pyramid_dims(image.height(), image.width())?;
        build_pyramid(&self.normalized_heatmap(image)?, image.height(), image.width())
    }
}
