//! Optimisation loop, checkpoints and ablation presets.

mod ablation;
mod adam;
mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::{CrossFusion, HeatmapPyramid};
use crate::image::{stack_images, ImageTensor};
use crate::losses::{total_loss, LossReport};
use crate::metrics::MetricReport;
use crate::net::DapLedNet;
use crate::restore::restore_image;
use crate::synth::{load_corpus, procedural_scene, synthesize_pairs, PairedSample};

pub use ablation::{run_ablation, AblationPreset, AblationRow, AblationTable, PublishedReference};
pub use adam::{clip_grad_norm, global_norm, Adam, BETA1, BETA2, EPS};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};

/// Stream of the batch sampler, kept apart from every other seeded stream.
const SAMPLER_STREAM: u64 = 0x5a;

pub const LOG_NAME: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        iteration: u64,
        #[serde(flatten)]
        loss: LossReport,
        grad_norm: f64,
    },
    Eval {
        iteration: u64,
        psnr: f64,
        ssim: f64,
        best: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Iteration count after the step.
    pub iteration: u64,
    pub loss: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Deterministic corpus for a configuration: either the pairs stored in
/// `data.corpus_dir` or procedural scenes degraded in memory. The trailing
/// `data.holdout` pairs form the evaluation split.
pub fn build_corpus(config: &Config) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let d = &config.data;
    let mut all = if d.corpus_dir.is_empty() {
        let scenes: Vec<ImageTensor> = (0..d.pairs as u64)
            .map(|i| procedural_scene(config.seed.wrapping_mul(1_000_003).wrapping_add(i), d.scene_size, d.scene_size))
            .collect();
        synthesize_pairs(&scenes, d.pairs, config.seed, &d.degradation)?
    } else {
        load_corpus(Path::new(&d.corpus_dir))?
    };
    if all.len() <= d.holdout {
        return Err(Error::config(format!(
            "corpus has {} pairs, not enough for a holdout of {}",
            all.len(),
            d.holdout
        )));
    }
    let crop = config.train.crop_size;
    if let Some(s) = all.iter().find(|s| s.sharp.height() < crop || s.sharp.width() < crop) {
        return Err(Error::config(format!(
            "pair {} is smaller than crop_size {crop}",
            s.id
        )));
    }
    let eval = all.split_off(all.len() - d.holdout);
    Ok((all, eval))
}

/// Training state: model, optimizer, sampler and counters.
pub struct Trainer {
    config: Config,
    net: DapLedNet,
    fusion: CrossFusion,
    prompt_embeds: Tensor,
    adam: Adam,
    sampler: ChaCha8Rng,
    iteration: u64,
    best_psnr: f64,
    train_set: Vec<PairedSample>,
    eval_set: Vec<PairedSample>,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        let (train, eval) = build_corpus(&config)?;
        Self::with_data(config, train, eval)
    }

    pub fn with_data(config: Config, train_set: Vec<PairedSample>, eval_set: Vec<PairedSample>) -> Result<Self> {
        Self::with_dtype(config, train_set, eval_set, DType::F32)
    }

    pub fn with_dtype(
        config: Config,
        train_set: Vec<PairedSample>,
        eval_set: Vec<PairedSample>,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        let net = DapLedNet::new(config.network.clone(), config.seed, dtype)?;
        let fusion = config.cross_fusion()?;
        let prompt_embeds = fusion.prompts().embeddings(fusion.backbone().as_ref())?.to_dtype(dtype)?;
        let adam = Adam::new(net.params(), config.train.learning_rate)?;
        let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
        sampler.set_stream(SAMPLER_STREAM);
        Ok(Self {
            config,
            net,
            fusion,
            prompt_embeds,
            adam,
            sampler,
            iteration: 0,
            best_psnr: f64::NEG_INFINITY,
            train_set,
            eval_set,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn net(&self) -> &DapLedNet {
        &self.net
    }

    pub fn fusion(&self) -> &CrossFusion {
        &self.fusion
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn best_psnr(&self) -> f64 {
        self.best_psnr
    }

    pub fn train_set(&self) -> &[PairedSample] {
        &self.train_set
    }

    pub fn eval_set(&self) -> &[PairedSample] {
        &self.eval_set
    }

    /// Draws `batch_size` random crops with optional flips.
    ///
    /// Every draw consumes the same number of random words whether or not
    /// flips are enabled, so toggling them never shifts later batches.
    pub fn sample_batch(&mut self) -> Result<Vec<(ImageTensor, ImageTensor)>> {
        let crop = self.config.train.crop_size;
        let (hflip, vflip) = (self.config.train.hflip, self.config.train.vflip);
        (0..self.config.train.batch_size)
            .map(|_| {
                let s = &self.train_set[self.sampler.random_range(0..self.train_set.len())];
                let top = self.sampler.random_range(0..=s.sharp.height() - crop);
                let left = self.sampler.random_range(0..=s.sharp.width() - crop);
                let fh = self.sampler.random::<bool>() && hflip;
                let fv = self.sampler.random::<bool>() && vflip;
                let mut d = s.degraded.crop(top, left, crop, crop)?;
                let mut g = s.sharp.crop(top, left, crop, crop)?;
                if fh {
                    d = d.flip_horizontal();
                    g = g.flip_horizontal();
                }
                if fv {
                    d = d.flip_vertical();
                    g = g.flip_vertical();
                }
                Ok((d, g))
            })
            .collect()
    }

    /// Gradients of the total loss for a batch of `(degraded, sharp)` pairs,
    /// one per parameter in registration order (zeros where a parameter is
    /// not reached).
    pub fn gradients(&self, batch: &[(ImageTensor, ImageTensor)]) -> Result<(LossReport, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let dtype = self.net.dtype();
        let pyramids = batch
            .iter()
            .map(|(d, _)| self.fusion.pyramid(d))
            .collect::<Result<Vec<_>>>()?;
        let weights = HeatmapPyramid::batch(&pyramids.iter().collect::<Vec<_>>(), &Device::Cpu, dtype)?;
        let degraded: Vec<&ImageTensor> = batch.iter().map(|(d, _)| d).collect();
        let sharp: Vec<&ImageTensor> = batch.iter().map(|(_, s)| s).collect();
        let x = stack_images(&degraded, &Device::Cpu, dtype)?;
        let y = stack_images(&sharp, &Device::Cpu, dtype)?;
        let out = self.net.forward(&x, &weights)?;
        let terms = total_loss(
            &out.restored,
            &y,
            &self.prompt_embeds,
            &self.config.loss,
            self.fusion.backbone().as_ref(),
        )?;
        let store = terms.total.backward()?;
        let grads = self
            .net
            .params()
            .iter()
            .map(|(_, p)| match store.get(p.as_tensor()) {
                Some(g) => Ok(g.detach()),
                None => Ok(p.as_tensor().zeros_like()?),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((terms.report, grads))
    }

    /// One forward, backward and Adam update on an explicit batch.
    pub fn train_step(&mut self, batch: &[(ImageTensor, ImageTensor)]) -> Result<StepReport> {
        let (loss, mut grads) = self.gradients(batch)?;
        let grad_norm = if self.config.train.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.config.train.grad_clip)?
        } else {
            global_norm(&grads)?
        };
        self.adam.update(self.net.params(), &grads)?;
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            loss,
            grad_norm,
        })
    }

    /// Samples a batch and takes one step.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.sample_batch()?;
        self.train_step(&batch)
    }

    /// Restores `samples` and scores them against their sharp images.
    pub fn evaluate(&self, samples: &[PairedSample]) -> Result<MetricReport> {
        let restored = samples
            .iter()
            .map(|s| restore_image(&self.net, &self.fusion, &s.degraded))
            .collect::<Result<Vec<_>>>()?;
        MetricReport::evaluate(
            samples
                .iter()
                .zip(&restored)
                .map(|(s, r)| (s.id.clone(), r, &s.sharp)),
        )
    }

    /// Evaluation split, or the training set when nothing is held out.
    pub fn evaluate_holdout(&self) -> Result<MetricReport> {
        if self.eval_set.is_empty() {
            self.evaluate(&self.train_set)
        } else {
            self.evaluate(&self.eval_set)
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self
            .net
            .params()
            .iter()
            .map(|(n, p)| Ok((n.to_string(), p.as_tensor().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            sampler_word_pos: self.sampler.get_word_pos(),
            adam_step: self.adam.step_count(),
            best_psnr: self.best_psnr,
            params,
            adam_m: self.adam.first_moments().to_vec(),
            adam_v: self.adam.second_moments().to_vec(),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.write(path)
    }

    /// Restores parameters, optimizer, sampler and counters.
    ///
    /// The checkpoint must come from an identical network configuration;
    /// everything is validated before any state is modified.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config.network != self.config.network {
            return Err(Error::Checkpoint(format!(
                "network configuration mismatch: checkpoint has {:?}, trainer has {:?}",
                ckpt.config.network, self.config.network
            )));
        }
        validate_params(&self.net, &ckpt.params)?;
        let dtype = self.net.dtype();
        let m = ckpt.adam_m.iter().map(|t| t.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?;
        let v = ckpt.adam_v.iter().map(|t| t.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?;
        self.adam.restore(ckpt.adam_step, m, v)?;
        for (name, t) in &ckpt.params {
            self.net.params().assign(name, t)?;
        }
        self.iteration = ckpt.iteration;
        self.best_psnr = ckpt.best_psnr;
        self.sampler.set_word_pos(ckpt.sampler_word_pos);
        Ok(())
    }

    /// Runs until `config.train.iterations`, logging, evaluating and
    /// checkpointing into `out_dir`. Returns the step reports of this call.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<Vec<StepReport>> {
        let t = self.config.train.clone();
        let log_path = out_dir.map(|d| d.join(LOG_NAME));
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut reports = Vec::new();
        while self.iteration < t.iterations {
            let r = self.step()?;
            reports.push(r);
            if t.log_interval > 0 && (r.iteration % t.log_interval == 0 || r.iteration == 1) {
                log::info!(
                    "iter {:>6}  total {:.5}  rec {:.5}  id {:.5}  clip {:+.5}",
                    r.iteration,
                    r.loss.total,
                    r.loss.rec,
                    r.loss.identity,
                    r.loss.clip
                );
            }
            if let Some(p) = &log_path {
                append_log(
                    p,
                    &LogRecord::Step {
                        iteration: r.iteration,
                        loss: r.loss,
                        grad_norm: r.grad_norm,
                    },
                )?;
            }
            let last = r.iteration == t.iterations;
            if t.eval_interval > 0 && (r.iteration % t.eval_interval == 0 || last) {
                let m = self.evaluate_holdout()?;
                let best = m.mean_psnr > self.best_psnr;
                if best {
                    self.best_psnr = m.mean_psnr;
                }
                log::info!("eval  iter {}  psnr {:.3}  ssim {:.4}", r.iteration, m.mean_psnr, m.mean_ssim);
                if let Some(d) = out_dir {
                    append_log(
                        &d.join(LOG_NAME),
                        &LogRecord::Eval {
                            iteration: r.iteration,
                            psnr: m.mean_psnr,
                            ssim: m.mean_ssim,
                            best,
                        },
                    )?;
                    if best {
                        self.save_checkpoint(&d.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            if let Some(d) = out_dir {
                if last || (t.checkpoint_interval > 0 && r.iteration % t.checkpoint_interval == 0) {
                    self.save_checkpoint(&d.join(LAST_CHECKPOINT))?;
                }
            }
        }
        Ok(reports)
    }
}

fn validate_params(net: &DapLedNet, params: &[(String, Tensor)]) -> Result<()> {
    let store = net.params();
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, network has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in params {
        let var = store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in the checkpoint, {:?} in the network",
                t.dims(),
                var.dims()
            )));
        }
    }
    Ok(())
}

/// Network rebuilt from a checkpoint, for inference.
pub fn load_network(path: &Path) -> Result<(Config, DapLedNet)> {
    let ckpt = Checkpoint::read(path)?;
    let net = DapLedNet::new(ckpt.config.network.clone(), ckpt.config.seed, DType::F32)?;
    validate_params(&net, &ckpt.params)?;
    for (name, t) in &ckpt.params {
        net.params().assign(name, t)?;
    }
    Ok((ckpt.config, net))
}

fn append_log(path: &PathBuf, record: &LogRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

/// Parses a training log back into records.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
