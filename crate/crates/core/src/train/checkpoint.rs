//! Checkpoints as safetensors files.
//!
//! Tensors are stored under `param.<name>`, `adam.m.<name>` and
//! `adam.v.<name>`. The header metadata carries the format version, the full
//! configuration as JSON, the iteration counter, the sampler position, the
//! optimizer step and the best evaluation PSNR.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::Config;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "dapled-checkpoint-1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub iteration: u64,
    pub sampler_word_pos: u128,
    pub adam_step: u64,
    pub best_psnr: f64,
    /// `(name, value)` in registration order.
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn view_to_tensor(v: &TensorView) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let data = v.data();
    let t = match v.dtype() {
        Dtype::F32 => {
            let vals: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let vals: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
            return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
        }
        let mut buffers: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = Vec::new();
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (prefix, t) in [("param", p), ("adam.m", &self.adam_m[i]), ("adam.v", &self.adam_v[i])] {
                let (dt, bytes) = tensor_bytes(t)?;
                buffers.push((format!("{prefix}.{name}"), t.dims().to_vec(), dt, bytes));
            }
        }
        let views = buffers
            .iter()
            .map(|(n, shape, dt, bytes)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(|e| ckpt_err(path, e))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("iteration".to_string(), self.iteration.to_string());
        meta.insert("sampler_word_pos".to_string(), self.sampler_word_pos.to_string());
        meta.insert("adam_step".to_string(), self.adam_step.to_string());
        meta.insert("best_psnr".to_string(), self.best_psnr.to_string());
        let order: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        meta.insert("param_order".to_string(), serde_json::to_string(&order)?);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("safetensors.tmp");
        safetensors::tensor::serialize_to_file(views, Some(meta), &tmp).map_err(|e| ckpt_err(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ckpt_err(path, e))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
        let get = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("missing `{k}`")));
        let format = get("format")?;
        if format != FORMAT_VERSION {
            return Err(ckpt_err(
                path,
                format!("unsupported format `{format}` (expected `{FORMAT_VERSION}`)"),
            ));
        }
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|e| ckpt_err(path, format!("{k}: {e}"))) };
        let config: Config = serde_json::from_str(get("config")?)?;
        let order: Vec<String> = serde_json::from_str(get("param_order")?)?;
        let load = |name: String| -> Result<Tensor> {
            view_to_tensor(&st.tensor(&name).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?)
        };
        let mut params = Vec::with_capacity(order.len());
        let mut adam_m = Vec::with_capacity(order.len());
        let mut adam_v = Vec::with_capacity(order.len());
        for n in order {
            params.push((n.clone(), load(format!("param.{n}"))?));
            adam_m.push(load(format!("adam.m.{n}"))?);
            adam_v.push(load(format!("adam.v.{n}"))?);
        }
        Ok(Self {
            config,
            iteration: num("iteration")?,
            sampler_word_pos: get("sampler_word_pos")?
                .parse()
                .map_err(|e| ckpt_err(path, format!("sampler_word_pos: {e}")))?,
            adam_step: num("adam_step")?,
            best_psnr: get("best_psnr")?
                .parse()
                .map_err(|e| ckpt_err(path, format!("best_psnr: {e}")))?,
            params,
            adam_m,
            adam_v,
        })
    }
}
