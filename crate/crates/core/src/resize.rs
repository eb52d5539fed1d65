//! Separable resampling expressed as interpolation matrices.
//!
//! Resizing an `H × W` plane to `H' × W'` is `Ry · X · Rxᵀ`, where `Ry` is
//! `H' × H` and `Rx` is `W' × W`. Writing it as two matrix products keeps
//! the operation differentiable on tensors and trivially reproducible on
//! plain slices.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Bilinear interpolation weights (`out × in`, row-major) using half-pixel
/// centers without corner alignment. Source coordinates outside the input
/// are clamped to the border, so each row sums to exactly one.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[i * inp + i0] += 1.0 - frac;
        m[i * inp + i1] += frac;
    }
    m
}

/// Averages `inp / cells` consecutive samples into each of `cells` outputs.
pub fn cell_average_matrix(cells: usize, inp: usize) -> Result<Vec<f64>> {
    if cells == 0 || inp % cells != 0 {
        return Err(Error::shape(format!(
            "{inp} samples cannot be split into {cells} equal cells"
        )));
    }
    let k = inp / cells;
    let mut m = vec![0.0; cells * inp];
    for c in 0..cells {
        for j in 0..k {
            m[c * inp + c * k + j] = 1.0 / k as f64;
        }
    }
    Ok(m)
}

/// `a (n × k) · b (k × m)` on row-major slices.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

/// Bilinearly resizes a single `h × w` plane.
pub fn resize_plane(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ry = bilinear_matrix(oh, h);
    let rx = bilinear_matrix(ow, w);
    let x: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
    let tmp = matmul(&ry, &x, oh, h, w);
    let mut out = vec![0.0f32; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for q in 0..w {
                acc += tmp[i * w + q] * rx[j * w + q];
            }
            out[i * ow + j] = acc as f32;
        }
    }
    out
}

/// 2×2 average pooling of an `h × w` plane (both even).
pub fn avg_pool2_plane(plane: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("cannot 2x2-pool an {h}x{w} plane")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let s = plane[2 * i * w + 2 * j] as f64
                + plane[2 * i * w + 2 * j + 1] as f64
                + plane[(2 * i + 1) * w + 2 * j] as f64
                + plane[(2 * i + 1) * w + 2 * j + 1] as f64;
            out[i * ow + j] = (s / 4.0) as f32;
        }
    }
    Ok(out)
}

pub(crate) fn matrix_tensor(m: &[f64], rows: usize, cols: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(m, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Applies `left (oh × H)` and `right (ow × W)` to every plane of an
/// `(N, C, H, W)` tensor, producing `(N, C, oh, ow)`.
pub(crate) fn separable_apply(x: &Tensor, left: &Tensor, right: &Tensor) -> Result<Tensor> {
    let y = left.broadcast_matmul(x)?;
    Ok(y.broadcast_matmul(&right.t()?)?)
}

/// Differentiable bilinear resize of an `(N, C, H, W)` tensor.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let ry = matrix_tensor(&bilinear_matrix(oh, h), oh, h, x.device(), x.dtype())?;
    let rx = matrix_tensor(&bilinear_matrix(ow, w), ow, w, x.device(), x.dtype())?;
    separable_apply(x, &ry, &rx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(16, 64), (64, 16), (224, 8), (7, 7), (3, 10)] {
            let m = bilinear_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_bilinear_is_identity() {
        let m = bilinear_matrix(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m[r * 5 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn exact_halving_is_pairwise_average() {
        // Half-pixel centers land exactly between two inputs.
        let m = bilinear_matrix(2, 4);
        assert_eq!(m, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn cell_average_rejects_uneven_split() {
        assert!(cell_average_matrix(16, 30).is_err());
        let m = cell_average_matrix(2, 4).unwrap();
        assert_eq!(m, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn tensor_resize_matches_plane_resize() {
        let plane: Vec<f32> = (0..6 * 4).map(|i| ((i * 7) % 11) as f32 / 11.0).collect();
        let expect = resize_plane(&plane, 6, 4, 9, 13);
        let t = Tensor::from_slice(&plane, (1, 1, 6, 4), &Device::Cpu).unwrap();
        let got = resize_bilinear(&t, 9, 13).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in expect.iter().zip(&got) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
