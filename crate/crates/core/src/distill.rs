//! Feature distillation: loss, configuration and the training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use efcm_tensor::nn::Mode;
use efcm_tensor::{derive_seed, AdamW, AdamWConfig, Graph, NodeId, Scalar, Tensor, WarmupCosine};

use crate::data::{preprocess_batch, Dataset, RgbImage};
use crate::error::{config, CoreError, Result};
use crate::students::{Student, Teacher, EXTRACTOR};

/// `MSE(F_t, F_s) + KL(softmax(F_t/τ) ‖ softmax(F_s/τ))`, the KL averaged
/// over rows.
pub fn distill_loss<T: Scalar>(g: &mut Graph<T>, ft: NodeId, fs: NodeId, tau: f64) -> Result<NodeId> {
    let mse = g.mse(ft, fs)?;
    let kl = g.kl_softmax(ft, fs, tau)?;
    Ok(g.add(mse, kl)?)
}

/// [`distill_loss`] on two plain vectors.
pub fn distill_loss_value(ft: &[f64], fs: &[f64], tau: f64) -> Result<f64> {
    if ft.len() != fs.len() {
        return Err(CoreError::Shape(format!("F_t has {} values, F_s {}", ft.len(), fs.len())));
    }
    let mut g = Graph::<f64>::inference();
    let t = g.constant(Tensor::from_vec([1, ft.len()], ft.to_vec())?);
    let s = g.constant(Tensor::from_vec([1, fs.len()], fs.to_vec())?);
    let l = distill_loss(&mut g, t, s, tau)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Precompute the frozen extractor's output once per sample.
    pub cache_extractor: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 1e-2,
            eps: 1e-8,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 64,
            tau: 1.0,
            seed: 0,
            checkpoint_every: 500,
            cache_extractor: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(config(format!(
                "warmup steps ({}) exceed total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.tau > 0.0) {
            return Err(config(format!("temperature must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be ≥ 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(config("learning rate must be ≥ 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<WarmupCosine> {
        Ok(WarmupCosine::new(self.lr, self.warmup_steps, self.total_steps)?)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Preprocessed images with their sample ids.
#[derive(Debug, Clone)]
pub struct DistillData {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
}

impl DistillData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Samples of `split` (all samples for `None`), preprocessed to
    /// `input_size` with the manifest's channel means.
    pub fn from_dataset(ds: &Dataset, split: Option<&str>, input_size: usize) -> Result<Self> {
        let idx: Vec<usize> = match split {
            Some(s) => ds.split_indices(s),
            None => (0..ds.images.len()).collect(),
        };
        let images: Vec<RgbImage> = idx.iter().map(|&i| ds.images[i].clone()).collect();
        Ok(Self {
            ids: idx.iter().map(|&i| ds.manifest.samples[i].id.clone()).collect(),
            images: preprocess_batch(&images, input_size, ds.manifest.channel_means)?,
        })
    }
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub student: Student<f32>,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trailing mean over `window` steps.
pub fn smooth(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        acc += l;
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Seeded sampler that walks shuffled permutations of `0..n`.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBA7C)),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Distill `student` toward `teacher` on `data`. Checkpoints (every
/// `checkpoint_every` steps and at the end) go to `ckpt_dir` when given.
pub fn distill_train(
    mut student: Student<f32>,
    data: &DistillData,
    teacher: &Teacher,
    cfg: &DistillConfig,
    ckpt_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Missing("distillation dataset is empty".into()));
    }
    let schedule = cfg.schedule()?;
    let targets = teacher.features(&data.ids, &data.images)?;
    if targets.dim(1) != student.spec.teacher_dim {
        return Err(CoreError::Shape(format!(
            "teacher dim {} vs student output {}",
            targets.dim(1),
            student.spec.teacher_dim
        )));
    }
    let cached = if student.spec.extractor_frozen && cfg.cache_extractor {
        Some(student.extract_batch(&data.images, 64)?)
    } else {
        None
    };
    let extractor_ids: Vec<_> = student
        .store
        .ids()
        .filter(|&id| student.store.param(id).name.starts_with(EXTRACTOR))
        .collect();

    let mut opt = AdamW::new(&student.store, cfg.adamw());
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.total_steps as usize);
    let mut lrs = Vec::with_capacity(cfg.total_steps as usize);
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.total_steps {
        let idx = sampler.next(cfg.batch_size);
        let mut g = Graph::new();
        let fs = match &cached {
            Some(h) => {
                let h = g.constant(h.select_first(&idx)?);
                student.forward_from_extracted(&mut g, h, Mode::Train)?
            }
            None => {
                let x = g.constant(data.images.select_first(&idx)?);
                student.forward(&mut g, x, Mode::Train)?
            }
        };
        let ft = g.constant(targets.select_first(&idx)?);
        let loss = distill_loss(&mut g, ft, fs, cfg.tau).map_err(|e| match e {
            CoreError::Tensor(efcm_tensor::TensorError::NonFinite { .. }) => {
                CoreError::NonFinite(format!("distillation loss at step {step}"))
            }
            other => other,
        })?;
        let lv = g.value(loss).item().to_f64();
        if !lv.is_finite() {
            return Err(CoreError::NonFinite(format!("distillation loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        let lr = schedule.lr(step);
        let report = opt.step(&mut student.store, &grads, lr)?;
        if student.spec.extractor_frozen && extractor_ids.iter().any(|id| report.updated.contains(id)) {
            return Err(CoreError::Contract(format!("frozen extractor updated at step {step}")));
        }
        let updates = g.take_stat_updates();
        student.store.apply_stat_updates(&updates)?;
        losses.push(lv);
        lrs.push(lr);

        if let Some(dir) = ckpt_dir {
            let periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
            if periodic || step == cfg.total_steps {
                let name = if step == cfg.total_steps {
                    "final.json".to_string()
                } else {
                    format!("step_{step:06}.json")
                };
                let path = dir.join(name);
                student.save(&path, serde_json::json!({ "distill": cfg, "step": step }))?;
                checkpoints.push(path);
            }
        }
    }
    Ok(DistillOutcome {
        student,
        losses,
        lrs,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(distill_loss_value(&[0.3, -1.0], &[0.3, -1.0], 1.0).unwrap(), 0.0);
        assert!((distill_loss_value(&[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(distill_loss_value(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(distill_loss_value(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[4.0, 2.0, 0.0, 2.0], 2), vec![4.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn sampler_is_seeded() {
        let a = BatchSampler::new(10, 3).next(25);
        let b = BatchSampler::new(10, 3).next(25);
        assert_eq!(a, b);
        let mut first: Vec<_> = a[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }
}
