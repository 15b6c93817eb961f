//! Patch-level fine-tuning: a distilled student plus a linear classifier,
//! trained with augmentation and label smoothing, best epoch by validation
//! AUC.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use efcm_tensor::nn::{Linear, Mode};
use efcm_tensor::{derive_seed, AdamW, AdamWConfig, Container, Graph, Init, NodeId, ParamStore, Tensor};

use crate::data::augment::{augment, AugmentSpec};
use crate::data::{preprocess, Dataset};
use crate::error::{config, CoreError, Result};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::mil::{best_epoch, smoothed_target, EpochLog};
use crate::students::Student;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub student_lr: f64,
    pub head_lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            student_lr: 1e-4,
            head_lr: 1e-3,
            batch_size: 32,
            label_smoothing: 0.1,
            betas: (0.9, 0.999),
            weight_decay: 1e-2,
            eps: 1e-8,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch size must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        self.augment.validate()
    }

    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchClassifier {
    pub student: Student<f32>,
    pub store: ParamStore<f32>,
    pub classifier: Linear,
    pub num_classes: usize,
}

impl PatchClassifier {
    pub fn new(student: Student<f32>, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(config("a classifier needs at least 2 classes"));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(derive_seed(seed, 0xC1A5));
        let classifier = Linear::new(&mut store, &mut init, "classifier", student.spec.teacher_dim, num_classes, true);
        Ok(Self {
            student,
            store,
            classifier,
            num_classes,
        })
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let f = self.student.forward(g, x, mode)?;
        Ok(self.classifier.forward(g, &self.store, f)?)
    }

    /// Softmax class scores, one row per image.
    pub fn predict(&self, images: &Tensor<f32>, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let n = images.dim(0);
        let mut rows = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let mut g = Graph::inference();
            let x = g.constant(images.narrow_first(start, len)?);
            let logits = self.forward(&mut g, x, Mode::Eval)?;
            for r in g.value(logits).data().chunks(self.num_classes) {
                let m = r.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let e: Vec<f64> = r.iter().map(|&v| (v as f64 - m).exp()).collect();
                let s: f64 = e.iter().sum();
                rows.push(e.into_iter().map(|v| v / s).collect());
            }
            start += len;
        }
        Ok(rows)
    }

    pub fn evaluate(&self, images: &Tensor<f32>, labels: &[usize], split: &str) -> Result<MetricsRecord> {
        let mut m = compute_metrics(&self.predict(images, 64)?, labels)?;
        m.split = split.to_string();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.student.save(&path.with_extension("student.json"), serde_json::json!({}))?;
        Container::from_store(&self.store, serde_json::json!({ "num_classes": self.num_classes }))?.save(path)?;
        Ok(())
    }
}

/// Preprocessed images and labels of one split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

pub fn split_data(ds: &Dataset, split: &str, input_size: usize) -> Result<SplitData> {
    let idx = ds.split_indices(split);
    let imgs: Vec<_> = idx.iter().map(|&i| ds.images[i].clone()).collect();
    Ok(SplitData {
        images: crate::data::preprocess_batch(&imgs, input_size, ds.manifest.channel_means)?,
        labels: idx.iter().map(|&i| ds.manifest.samples[i].label).collect(),
    })
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: PatchClassifier,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub val: Option<MetricsRecord>,
    pub test: Option<MetricsRecord>,
}

type Snapshot = (BTreeMap<String, Tensor<f32>>, BTreeMap<String, Tensor<f32>>);

fn snapshot(m: &PatchClassifier) -> Snapshot {
    (
        m.student.store.named_arrays().into_iter().collect(),
        m.store.named_arrays().into_iter().collect(),
    )
}

/// Fine-tune on the train split of a patch dataset. Each epoch re-augments
/// the raw training rasters with per-(epoch, sample) seeds.
pub fn finetune_patches(student: Student<f32>, ds: &Dataset, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let size = student.spec.input_size;
    let k = ds.manifest.num_classes;
    let mut model = PatchClassifier::new(student, k, cfg.seed)?;
    let train = ds.split_indices("train");
    if train.is_empty() {
        return Err(CoreError::Missing("no training samples".into()));
    }
    let val = split_data(ds, "val", size)?;
    let test = split_data(ds, "test", size)?;
    let means = ds.manifest.channel_means;

    let mut s_opt = AdamW::new(&model.student.store, cfg.adamw(cfg.student_lr));
    let mut h_opt = AdamW::new(&model.store, cfg.adamw(cfg.head_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xF17E));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Snapshot)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * 3 * size * size);
            let mut targets = Vec::with_capacity(batch.len() * k);
            for &i in batch {
                let seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64);
                let img = augment(&ds.images[i], &cfg.augment, seed)?.image;
                data.extend_from_slice(preprocess(&img, size, means)?.data());
                let label = ds.manifest.samples[i].label;
                targets.extend(smoothed_target(label, k, cfg.label_smoothing).into_iter().map(|v| v as f32));
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec([batch.len(), 3, size, size], data)?);
            let logits = model.forward(&mut g, x, Mode::Train)?;
            let loss = g.cross_entropy(logits, &Tensor::from_vec([batch.len(), k], targets)?)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(CoreError::NonFinite(format!("fine-tuning loss in epoch {epoch}")));
            }
            total += lv * batch.len() as f64;
            let grads = g.backward(loss)?;
            s_opt.step(&mut model.student.store, &grads, cfg.student_lr)?;
            h_opt.step(&mut model.store, &grads, cfg.head_lr)?;
            let updates = g.take_stat_updates();
            model.student.store.apply_stat_updates(&updates)?;
        }
        let v = if val.labels.is_empty() {
            None
        } else {
            model.evaluate(&val.images, &val.labels, "val").ok()
        };
        if let Some(m) = &v {
            if best.as_ref().is_none_or(|(b, _)| m.auc > *b) {
                best = Some((m.auc, snapshot(&model)));
            }
        }
        logs.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_auc: v.as_ref().map(|m| m.auc),
            val_acc: v.as_ref().map(|m| m.acc),
        });
    }
    if let Some((_, (s, h))) = best {
        model.student.store.load_named(&s)?;
        model.store.load_named(&h)?;
    }
    let best_e = best_epoch(&logs);
    let with_epoch = |mut m: MetricsRecord| {
        m.epoch = best_e;
        m
    };
    let val_m = if val.labels.is_empty() {
        None
    } else {
        Some(with_epoch(model.evaluate(&val.images, &val.labels, "val")?))
    };
    let test_m = if test.labels.is_empty() {
        None
    } else {
        Some(with_epoch(model.evaluate(&test.images, &test.labels, "test")?))
    };
    Ok(FinetuneOutcome {
        model,
        epochs: logs,
        best_epoch: best_e,
        val: val_m,
        test: test_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_patches, PatchSynthConfig};
    use crate::students::ModelSpec;

    #[test]
    fn restores_the_best_validation_epoch() {
        let ds = synth_patches(
            &PatchSynthConfig {
                samples_per_class: 20,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let student = Student::<f32>::new(ModelSpec::desk_fpd(), 3).unwrap();
        let cfg = FinetuneConfig {
            epochs: 3,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let out = finetune_patches(student, &ds, &cfg).unwrap();
        assert_eq!(out.epochs.len(), 3);
        let val = out.val.unwrap();
        assert_eq!(Some(val.auc), out.epochs[out.best_epoch.unwrap() - 1].val_auc);
        assert!((0.0..=1.0).contains(&out.test.unwrap().auc));
    }
}
