//! Deterministic closed-form encoder pair for tests and desk-scale runs.
//!
//! Definition, for seed `s` and embedding dimension `d`:
//!
//! * Input images are bilinearly resized to 64×64 (half-pixel centres, see
//!   [`crate::resize::bilinear_matrix`]) and split into a 16×16 grid of 4×4
//!   cells. Cell `(i, j)` yields the feature `φ = [r̄, ḡ, b̄, 1]` of its mean
//!   colour plus a constant.
//! * The image projection `Wᵢ` (`d × 4`) is drawn from
//!   `ChaCha8Rng::seed_from_u64(s)` on stream 1, row-major, each entry a
//!   standard normal divided by `√4`.
//! * Patch embedding `(i, j)` is `Wᵢ φᵢⱼ` scaled to unit L2 norm; the global
//!   embedding is `Wᵢ mean(φ)` scaled to unit norm.
//! * Text: the prompt's byte histogram `h` (`h_b = count(b) / len`) is
//!   projected by `Wₜ` (`d × 256`, stream 2, entries `N(0,1)/√256`) and
//!   scaled to unit norm.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_image_batch, l2_normalize, Backbone};
use crate::error::{Error, Result};
use crate::resize::{bilinear_matrix, cell_average_matrix, matmul, matrix_tensor};

#[derive(Debug, Clone)]
pub struct StubBackbone {
    seed: u64,
    dim: usize,
    image_proj: Vec<f64>,
    text_proj: Vec<f64>,
}

impl StubBackbone {
    pub const NATIVE_SIZE: usize = 64;
    pub const GRID: usize = 16;
    pub const IMAGE_FEATURES: usize = 4;
    pub const TEXT_FEATURES: usize = 256;
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("stub embedding dimension must be positive"));
        }
        Ok(Self {
            seed,
            dim,
            image_proj: seeded_projection(seed, 1, dim, Self::IMAGE_FEATURES),
            text_proj: seeded_projection(seed, 2, dim, Self::TEXT_FEATURES),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `d × 4` image projection, row-major.
    pub fn image_projection(&self) -> &[f64] {
        &self.image_proj
    }

    /// `d × 256` text projection, row-major.
    pub fn text_projection(&self) -> &[f64] {
        &self.text_proj
    }

    /// `(16, H)` and `(16, W)` operators mapping an image to cell means.
    fn cell_operators(&self, h: usize, w: usize, device: &Device, dtype: DType) -> Result<(Tensor, Tensor)> {
        let n = Self::NATIVE_SIZE;
        let g = Self::GRID;
        let cells = cell_average_matrix(g, n)?;
        let ay = matmul(&cells, &bilinear_matrix(n, h), g, n, h);
        let ax = matmul(&cells, &bilinear_matrix(n, w), g, n, w);
        Ok((
            matrix_tensor(&ay, g, h, device, dtype)?,
            matrix_tensor(&ax, g, w, device, dtype)?,
        ))
    }

    /// Homogeneous cell features `(N, 256, 4)`.
    fn cell_features(&self, images: &Tensor) -> Result<Tensor> {
        let (n, h, w) = check_image_batch(images)?;
        let (ay, ax) = self.cell_operators(h, w, images.device(), images.dtype())?;
        let g = Self::GRID;
        let means = crate::resize::separable_apply(images, &ay, &ax)?; // (N,3,16,16)
        let feats = means.permute((0, 2, 3, 1))?.reshape((n, g * g, 3))?;
        let ones = Tensor::ones((n, g * g, 1), images.dtype(), images.device())?;
        Ok(Tensor::cat(&[feats, ones], 2)?)
    }

    fn image_proj_t(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        // (4, d) so that features (.., 4) @ proj -> (.., d)
        matrix_tensor(&self.image_proj, self.dim, Self::IMAGE_FEATURES, device, dtype)?
            .t()
            .map_err(Into::into)
    }
}

/// Seeded `rows × cols` Gaussian matrix scaled by `1/√cols`.
fn seeded_projection(seed: u64, stream: u64, rows: usize, cols: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

impl Backbone for StubBackbone {
    fn id(&self) -> String {
        format!("stub(seed={},dim={})", self.seed, self.dim)
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> (usize, usize) {
        (Self::GRID, Self::GRID)
    }

    fn patch_tokens(&self, images: &Tensor) -> Result<Tensor> {
        let feats = self.cell_features(images)?;
        let proj = self.image_proj_t(images.device(), images.dtype())?;
        l2_normalize(&feats.broadcast_matmul(&proj)?)
    }

    fn image_embeddings(&self, images: &Tensor) -> Result<Tensor> {
        let feats = self.cell_features(images)?.mean(1)?; // (N, 4)
        let proj = self.image_proj_t(images.device(), images.dtype())?;
        l2_normalize(&feats.matmul(&proj)?)
    }

    fn text_embeddings(&self, prompts: &[&str]) -> Result<Tensor> {
        let mut hist = vec![0.0f64; prompts.len() * Self::TEXT_FEATURES];
        for (p, text) in prompts.iter().enumerate() {
            if text.is_empty() {
                return Err(Error::Validation("empty prompt string".into()));
            }
            let inv = 1.0 / text.len() as f64;
            for &b in text.as_bytes() {
                hist[p * Self::TEXT_FEATURES + b as usize] += inv;
            }
        }
        let device = Device::Cpu;
        let h = matrix_tensor(&hist, prompts.len(), Self::TEXT_FEATURES, &device, DType::F64)?;
        let w = matrix_tensor(&self.text_proj, self.dim, Self::TEXT_FEATURES, &device, DType::F64)?;
        let e = l2_normalize(&h.matmul(&w.t()?)?)?;
        debug_assert_eq!(e.dim(D::Minus1)?, self.dim);
        Ok(e.to_dtype(DType::F32)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;

    #[test]
    fn projections_depend_on_seed() {
        let a = StubBackbone::new(0, 8).unwrap();
        let b = StubBackbone::new(1, 8).unwrap();
        assert_ne!(a.image_projection(), b.image_projection());
        assert_eq!(a.image_projection(), StubBackbone::new(0, 8).unwrap().image_projection());
    }

    #[test]
    fn patch_tokens_have_unit_norm() {
        let bb = StubBackbone::new(3, 16).unwrap();
        let img = ImageTensor::from_fn(40, 24, |y, x, c| ((y + 2 * x + c) % 7) as f32 / 7.0);
        let t = img.to_tensor(&Device::Cpu, DType::F64).unwrap();
        let tokens = bb.patch_tokens(&t).unwrap();
        assert_eq!(tokens.dims(), &[1, 256, 16]);
        let norms: Vec<f64> = tokens.sqr().unwrap().sum(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-10));
    }

    #[test]
    fn empty_prompt_is_a_validation_error() {
        let bb = StubBackbone::new(0, 8).unwrap();
        assert!(matches!(bb.text_embeddings(&[""]), Err(Error::Validation(_))));
    }
}
