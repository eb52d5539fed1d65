//! Hand-written CPU kernels with analytic backward passes.
//!
//! Depthwise 3×3 convolution:
//! `y[n,c,i,j] = Σ_{a,b} w[c, 3a+b] · x[n,c,i+a-1,j+b-1]` with zero padding.
//! The input gradient is the same convolution with the taps reversed; the
//! weight gradient is a per-channel correlation of input and output grad.
//!
//! Channel layer norm: `y = γ·(x − μ)/sqrt(σ² + ε) + β`, statistics taken
//! over the channel axis at every pixel. With `x̂` the normalised input,
//! `ĝ = γ·g` and `⟨·⟩` the channel mean, `∂x = (ĝ − ⟨ĝ⟩ − x̂⟨ĝ x̂⟩)/sqrt(σ² + ε)`.

use std::ops::{Add, AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};

/// Forward op on `(x (N,C,H,W), w (C,9))`; `flipped` reverses the taps.
struct DwConv {
    flipped: bool,
}

/// Weight gradient on `(x (N,C,H,W), g (N,C,H,W))`, producing `(C, 9)`.
struct DwWeightGrad {
    flipped: bool,
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("depthwise conv: {what} must be contiguous"),
    }
}

#[inline]
fn tap(k: usize, flipped: bool) -> usize {
    if flipped {
        8 - k
    } else {
        k
    }
}

fn dw_forward<T>(x: &[T], w: &[T], dims: (usize, usize, usize, usize), flipped: bool) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T> + AddAssign,
{
    let (n, c, h, wd) = dims;
    let mut out = vec![T::default(); n * c * h * wd];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * wd;
            let xs = &x[plane..plane + h * wd];
            let ys = &mut out[plane..plane + h * wd];
            for k in 0..9 {
                let wk = w[ch * 9 + tap(k, flipped)];
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let i0 = (-dy).max(0) as usize;
                let i1 = (h as isize - dy.max(0)) as usize;
                let j0 = (-dx).max(0) as usize;
                let j1 = (wd as isize - dx.max(0)) as usize;
                let len = j1 - j0;
                for i in i0..i1 {
                    let src = ((i as isize + dy) as usize) * wd + (j0 as isize + dx) as usize;
                    let row = &mut ys[i * wd + j0..i * wd + j0 + len];
                    let xrow = &xs[src..src + len];
                    for j in 0..len {
                        row[j] += wk * xrow[j];
                    }
                }
            }
        }
    }
    out
}

fn dw_weight_grad<T>(x: &[T], g: &[T], dims: (usize, usize, usize, usize), flipped: bool) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T> + AddAssign,
{
    let (n, c, h, wd) = dims;
    let mut out = vec![T::default(); c * 9];
    let mut partial = vec![T::default(); wd];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * wd;
            let xs = &x[plane..plane + h * wd];
            let gs = &g[plane..plane + h * wd];
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let i0 = (-dy).max(0) as usize;
                let i1 = (h as isize - dy.max(0)) as usize;
                let j0 = (-dx).max(0) as usize;
                let j1 = (wd as isize - dx.max(0)) as usize;
                // Element-wise partial sums vectorise; a scalar reduction would not.
                let len = j1 - j0;
                let acc = &mut partial[..len];
                acc.iter_mut().for_each(|a| *a = T::default());
                for i in i0..i1 {
                    let src = ((i as isize + dy) as usize) * wd + (j0 as isize + dx) as usize;
                    let grow = &gs[i * wd + j0..i * wd + j0 + len];
                    let xrow = &xs[src..src + len];
                    for j in 0..len {
                        acc[j] += grow[j] * xrow[j];
                    }
                }
                let mut total = T::default();
                for &a in acc.iter() {
                    total += a;
                }
                out[ch * 9 + tap(k, flipped)] += total;
            }
        }
    }
    out
}

fn check_dims(l1: &Layout, l2: &Layout, weight: bool) -> candle_core::Result<(usize, usize, usize, usize)> {
    let dims = l1.shape().dims4()?;
    if weight {
        let (c, k) = l2.shape().dims2()?;
        if c != dims.1 || k != 9 {
            candle_core::bail!("depthwise weight {:?} does not match input {:?}", l2.shape(), l1.shape());
        }
    } else if l2.shape().dims() != l1.shape().dims() {
        candle_core::bail!("depthwise grad {:?} does not match input {:?}", l2.shape(), l1.shape());
    }
    Ok(dims)
}

impl CustomOp2 for DwConv {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = check_dims(l1, l2, true)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(dw_forward(
                contiguous(x, l1, "input")?,
                contiguous(w, l2, "weight")?,
                dims,
                self.flipped,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(dw_forward(
                contiguous(x, l1, "input")?,
                contiguous(w, l2, "weight")?,
                dims,
                self.flipped,
            )),
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &DwConv { flipped: !self.flipped })?;
        let gw = x.apply_op2_no_bwd(&grad, &DwWeightGrad { flipped: self.flipped })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DwWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = check_dims(l1, l2, false)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(dw_weight_grad(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "grad")?,
                dims,
                self.flipped,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(dw_weight_grad(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "grad")?,
                dims,
                self.flipped,
            )),
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((dims.1, 9))))
    }
}

/// Depthwise 3×3 convolution of `(N, C, H, W)` with `(C, 9)` taps.
pub(crate) fn depthwise3x3(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, DwConv { flipped: false })
}


trait Real: Copy + Default + Add<Output = Self> + Mul<Output = Self> + AddAssign + std::ops::Sub<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn rsqrt(self) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn rsqrt(self) -> Self {
        1.0 / self.sqrt()
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn rsqrt(self) -> Self {
        1.0 / self.sqrt()
    }
}

/// Per-pixel mean and reciprocal standard deviation over channels, for one
/// batch element laid out as `c` planes of `hw` values.
fn channel_stats<T: Real>(x: &[T], c: usize, hw: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut mean = vec![T::default(); hw];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_c);
    let mut var = vec![T::default(); hw];
    for ch in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let eps = T::from_f64(eps);
    let rstd = var.into_iter().map(|s| (s * inv_c + eps).rsqrt()).collect();
    (mean, rstd)
}

struct LayerNormOp {
    eps: f64,
}

struct LayerNormGradInput {
    eps: f64,
}

struct LayerNormGradParams {
    eps: f64,
}

fn ln_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, hw) = dims;
    let mut out = vec![T::default(); x.len()];
    for b in 0..n {
        let xs = &x[b * c * hw..(b + 1) * c * hw];
        let (mean, rstd) = channel_stats(xs, c, hw, eps);
        for ch in 0..c {
            let (g, be) = (gamma[ch], beta[ch]);
            let o = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (((y, &v), &m), &r) in o.iter_mut().zip(&xs[ch * hw..(ch + 1) * hw]).zip(&mean).zip(&rstd) {
                *y = g * ((v - m) * r) + be;
            }
        }
    }
    out
}

fn ln_grad_input<T: Real>(x: &[T], gamma: &[T], grad: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, hw) = dims;
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut out = vec![T::default(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        let xs = &x[base..base + c * hw];
        let gs = &grad[base..base + c * hw];
        let (mean, rstd) = channel_stats(xs, c, hw, eps);
        let mut a = vec![T::default(); hw];
        let mut bb = vec![T::default(); hw];
        for ch in 0..c {
            let gm = gamma[ch];
            for p in 0..hw {
                let gh = gs[ch * hw + p] * gm;
                let xh = (xs[ch * hw + p] - mean[p]) * rstd[p];
                a[p] += gh;
                bb[p] += gh * xh;
            }
        }
        for ch in 0..c {
            let gm = gamma[ch];
            let o = &mut out[base + ch * hw..base + (ch + 1) * hw];
            for p in 0..hw {
                let gh = gs[ch * hw + p] * gm;
                let xh = (xs[ch * hw + p] - mean[p]) * rstd[p];
                o[p] = rstd[p] * (gh - a[p] * inv_c - xh * (bb[p] * inv_c));
            }
        }
    }
    out
}

/// `(2, C)`: row 0 is `∂γ`, row 1 is `∂β`.
fn ln_grad_params<T: Real>(x: &[T], grad: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, hw) = dims;
    let mut out = vec![T::default(); 2 * c];
    for b in 0..n {
        let base = b * c * hw;
        let xs = &x[base..base + c * hw];
        let (mean, rstd) = channel_stats(xs, c, hw, eps);
        for ch in 0..c {
            let (mut dg, mut db) = (T::default(), T::default());
            for p in 0..hw {
                let g = grad[base + ch * hw + p];
                dg += g * ((xs[ch * hw + p] - mean[p]) * rstd[p]);
                db += g;
            }
            out[ch] += dg;
            out[c + ch] += db;
        }
    }
    out
}

fn ln_dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (n, c, h, w) = l.shape().dims4()?;
    Ok((n, c, h * w))
}

fn check_channel_vec(l: &Layout, c: usize) -> candle_core::Result<()> {
    if l.shape().dims() != [c] {
        candle_core::bail!("layer norm parameter {:?} does not match {c} channels", l.shape());
    }
    Ok(())
}

fn check_same(a: &Layout, b: &Layout) -> candle_core::Result<()> {
    if a.shape() != b.shape() {
        candle_core::bail!("layer norm gradient {:?} does not match input {:?}", b.shape(), a.shape());
    }
    Ok(())
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "channel-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = ln_dims(l1)?;
        check_channel_vec(l2, dims.1)?;
        check_channel_vec(l3, dims.1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(ln_forward(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "weight")?,
                contiguous(b, l3, "bias")?,
                dims,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(ln_forward(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "weight")?,
                contiguous(b, l3, "bias")?,
                dims,
                self.eps,
            )),
            _ => candle_core::bail!("layer norm supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = x.apply_op3_no_bwd(gamma, &grad, &LayerNormGradInput { eps: self.eps })?;
        let gp = x.apply_op2_no_bwd(&grad, &LayerNormGradParams { eps: self.eps })?;
        Ok((Some(gx), Some(gp.get(0)?), Some(gp.get(1)?)))
    }
}

impl CustomOp3 for LayerNormGradInput {
    fn name(&self) -> &'static str {
        "channel-layer-norm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = ln_dims(l1)?;
        check_channel_vec(l2, dims.1)?;
        check_same(l1, l3)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => CpuStorage::F32(ln_grad_input(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "weight")?,
                contiguous(d, l3, "grad")?,
                dims,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => CpuStorage::F64(ln_grad_input(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "weight")?,
                contiguous(d, l3, "grad")?,
                dims,
                self.eps,
            )),
            _ => candle_core::bail!("layer norm supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for LayerNormGradParams {
    fn name(&self) -> &'static str {
        "channel-layer-norm-grad-params"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = ln_dims(l1)?;
        check_same(l1, l2)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(d)) => CpuStorage::F32(ln_grad_params(
                contiguous(x, l1, "input")?,
                contiguous(d, l2, "grad")?,
                dims,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(d)) => CpuStorage::F64(ln_grad_params(
                contiguous(x, l1, "input")?,
                contiguous(d, l2, "grad")?,
                dims,
                self.eps,
            )),
            _ => candle_core::bail!("layer norm supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((2, dims.1))))
    }
}

/// Channel layer norm of `(N, C, H, W)` with `(C,)` scale and shift.
pub(crate) fn channel_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}
