use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::net::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with a constant learning rate and no weight decay.
///
/// Moment buffers follow the registration order of the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(_, p)| Ok(p.as_tensor().zeros_like()?))
                .collect()
        };
        Ok(Self {
            learning_rate,
            step: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Replaces the optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        for (old, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if old.dims() != new.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape {:?} does not match {:?}",
                    new.dims(),
                    old.dims()
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update. `grads[i]` belongs to the `i`-th parameter.
    pub fn update(&mut self, params: &ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::shape("gradient count does not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
            // Detached so the moments never keep an autograd graph alive.
            let g = g.detach();
            let m = ((&self.m[i] * BETA1)? + (&g * (1.0 - BETA1))?)?;
            let v = ((&self.v[i] * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + EPS)?;
            let delta = ((&m * (self.learning_rate / bc1))? / denom)?;
            p.set(&(p.as_tensor().detach() - delta)?)?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
    let mut total = 0.0f64;
    for g in grads {
        total += g
            .sqr()?
            .sum_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}
