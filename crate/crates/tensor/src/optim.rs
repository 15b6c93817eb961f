//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to 0
/// at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl WarmupCosine {
    pub fn new(base: f64, warmup: u64, total: u64) -> Result<Self> {
        if warmup > total {
            return Err(TensorError::invalid(
                "WarmupCosine",
                format!("warmup ({warmup}) exceeds total steps ({total})"),
            ));
        }
        Ok(Self { base, warmup, total })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                return self.base;
            }
            return self.base * (step as f64 / self.warmup as f64);
        }
        self.lr_at(step as f64)
    }

    /// The schedule at a fractional step.
    pub fn lr_at(&self, t: f64) -> f64 {
        let (warmup, total) = (self.warmup as f64, self.total as f64);
        if t <= warmup {
            if self.warmup == 0 {
                return self.base;
            }
            return self.base * (t / warmup);
        }
        if t >= total {
            return 0.0;
        }
        let progress = (t - warmup) / (total - warmup);
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// AdamW bound to a single parameter store. Updates are computed in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    store_uid: u64,
    step: u64,
    state: HashMap<ParamId, Moments<T>>,
}

/// Which parameters an optimizer step touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepReport {
    pub updated: BTreeSet<ParamId>,
    pub frozen: BTreeSet<ParamId>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            store_uid: store.uid(),
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` for every trainable parameter that has
    /// a gradient. A gradient on a frozen parameter is an error, and the
    /// returned update and frozen sets are checked to be disjoint.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<StepReport> {
        if store.uid() != self.store_uid {
            return Err(TensorError::invalid("AdamW::step", "optimizer bound to a different store"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut report = StepReport::default();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                if grads.param(store, id).is_some() {
                    return Err(TensorError::invalid(
                        "AdamW::step",
                        format!("gradient for frozen parameter {}", store.param(id).name),
                    ));
                }
                report.frozen.insert(id);
                continue;
            }
            let Some(g) = grads.param(store, id) else { continue };
            g.ensure_finite("AdamW::step")?;
            let shape = store.get(id).shape().to_vec();
            let mom = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
            });
            let decay = 1.0 - lr * self.config.weight_decay;
            let eps = self.config.eps;
            let p = store.get_mut(id);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                let gi = gi.to_f64();
                let mi = b1 * m.to_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.to_f64() + (1.0 - b2) * gi * gi;
                *m = T::from_f64(mi);
                *v = T::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *w = T::from_f64(w.to_f64() * decay - lr * update);
            }
            report.updated.insert(id);
        }
        if !report.updated.is_disjoint(&report.frozen) {
            return Err(TensorError::invalid("AdamW::step", "frozen and updated sets overlap"));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn warmup_midpoint_and_junction() {
        let s = WarmupCosine::new(1e-4, 200, 2000).unwrap();
        assert_eq!(s.lr(100), 0.5e-4);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr_at(200.0 - 1e-9) - s.lr_at(200.0 + 1e-9)).abs() < 1e-12);
        assert!(s.lr(201) < s.lr(200));
        assert_eq!(s.lr(2000), 0.0);
        assert!(WarmupCosine::new(1e-4, 300, 200).is_err());
    }

    #[test]
    fn first_step_moves_by_lr_and_skips_frozen() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec([1], vec![1.0]).unwrap(), true);
        let f = store.add("f", Tensor::from_vec([1], vec![1.0]).unwrap(), false);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let fn_ = g.param(&store, f);
        let p = g.mul(wn, fn_).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        let report = opt.step(&mut store, &grads, 0.1).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((store.get(w).data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(store.get(f).data()[0], 1.0);
        assert!(report.updated.contains(&w) && report.frozen.contains(&f));
    }
}
