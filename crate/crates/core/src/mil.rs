//! Slide-level multiple-instance learning: bags, the gated-attention head,
//! instance selection, the reuse / retrain / end-to-end strategies with
//! parameter-hash audits, evaluation and attention heatmaps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use efcm_tensor::nn::{Linear, Mode};
use efcm_tensor::{
    derive_seed, AdamW, AdamWConfig, Container, Graph, Init, NodeId, ParamId, ParamStore, Scalar, StepReport, Tensor,
};

use crate::data::preprocess::preprocess;
use crate::data::segment::PatchCoord;
use crate::data::synth::Dataset;
use crate::error::{config, CoreError, Result};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::students::{Student, Teacher, EXTRACTOR};

/// One slide: instance coordinates plus preprocessed patches and/or
/// per-instance features.
#[derive(Debug, Clone)]
pub struct Bag {
    pub slide_id: String,
    pub label: usize,
    pub split: String,
    pub width: usize,
    pub height: usize,
    pub coords: Vec<PatchCoord>,
    pub instance_ids: Vec<String>,
    /// Ground-truth tumor flags, used only for evaluation.
    pub tumor: Vec<bool>,
    /// `N×3×S×S`.
    pub images: Option<Tensor<f32>>,
    /// `N×D`.
    pub features: Option<Tensor<f32>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(CoreError::Missing(format!("bag {} has no instances", self.slide_id)));
        }
        if self.instance_ids.len() != n || self.tumor.len() != n {
            return Err(CoreError::Shape(format!("bag {}: per-instance lists disagree", self.slide_id)));
        }
        for c in &self.coords {
            if c.x + c.size > self.width || c.y + c.size > self.height {
                return Err(CoreError::Shape(format!(
                    "bag {}: patch at ({}, {}) outside {}×{}",
                    self.slide_id, c.x, c.y, self.width, self.height
                )));
            }
        }
        for (what, t) in [("images", &self.images), ("features", &self.features)] {
            if let Some(t) = t {
                if t.dim(0) != n {
                    return Err(CoreError::Shape(format!("bag {}: {} {what} rows for {n} instances", self.slide_id, t.dim(0))));
                }
            }
        }
        Ok(())
    }

    pub fn features(&self) -> Result<&Tensor<f32>> {
        self.features
            .as_ref()
            .ok_or_else(|| CoreError::Missing(format!("bag {} has no features", self.slide_id)))
    }

    pub fn images(&self) -> Result<&Tensor<f32>> {
        self.images
            .as_ref()
            .ok_or_else(|| CoreError::Missing(format!("bag {} has no images", self.slide_id)))
    }

    pub fn with_features(&self, features: Tensor<f32>) -> Result<Self> {
        let b = Self {
            features: Some(features),
            ..self.clone()
        };
        b.validate()?;
        Ok(b)
    }
}

/// Bags from a slide-level dataset, patches preprocessed to `input_size`
/// with the manifest's channel means.
pub fn bags_from_dataset(ds: &Dataset, input_size: usize) -> Result<Vec<Bag>> {
    let index = ds.sample_index();
    let means = ds.manifest.channel_means;
    ds.manifest
        .slides
        .iter()
        .map(|s| {
            let mut data = Vec::new();
            for p in &s.patches {
                let i = *index
                    .get(p.sample.as_str())
                    .ok_or_else(|| CoreError::Missing(format!("raster for {}", p.sample)))?;
                data.extend_from_slice(preprocess(&ds.images[i], input_size, means)?.data());
            }
            let n = s.patches.len();
            let bag = Bag {
                slide_id: s.id.clone(),
                label: s.label,
                split: s.split.clone(),
                width: s.width,
                height: s.height,
                coords: s.patches.iter().map(|p| p.coord).collect(),
                instance_ids: s.patches.iter().map(|p| p.sample.clone()).collect(),
                tumor: s.patches.iter().map(|p| p.tumor).collect(),
                images: Some(Tensor::from_vec([n, 3, input_size, input_size], data)?),
                features: None,
            };
            bag.validate()?;
            Ok(bag)
        })
        .collect()
}

pub fn with_teacher_features(bags: &[Bag], teacher: &Teacher) -> Result<Vec<Bag>> {
    bags.par_iter()
        .map(|b| b.with_features(teacher.features(&b.instance_ids, b.images()?)?))
        .collect()
}

pub fn with_student_features(bags: &[Bag], student: &Student<f32>) -> Result<Vec<Bag>> {
    bags.par_iter().map(|b| b.with_features(student.embed(b.images()?, 64)?)).collect()
}

pub fn split<'a>(bags: &'a [Bag], name: &str) -> Vec<&'a Bag> {
    bags.iter().filter(|b| b.split == name).collect()
}

/// Parameter-name prefix of every head parameter.
pub const HEAD: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

/// Gated attention MIL: `h = relu(W_e x)`,
/// `s = w_c·(tanh(W_a h) ⊙ σ(W_b h))`, `α = softmax(s)`, `z = Σ α_i h_i`,
/// logits `W_o z`.
#[derive(Debug, Clone)]
pub struct AttentionMILHead<T: Scalar> {
    pub cfg: HeadConfig,
    pub store: ParamStore<T>,
    pub embed: Linear,
    pub att_tanh: Linear,
    pub att_sigmoid: Linear,
    pub att_out: Linear,
    pub classifier: Linear,
}

/// Node ids of one pooled bag.
#[derive(Debug, Clone, Copy)]
pub struct PoolNodes {
    /// `1×h`.
    pub embedding: NodeId,
    /// `1×N`.
    pub weights: NodeId,
    /// `1×K`.
    pub logits: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub embedding: Vec<T>,
    pub weights: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Scalar> AttentionMILHead<T> {
    pub fn new(cfg: HeadConfig, seed: u64) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.hidden == 0 || cfg.num_classes < 2 {
            return Err(config(format!("invalid head {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(derive_seed(seed, 0x4EAD));
        let (d, h, k) = (cfg.in_dim, cfg.hidden, cfg.num_classes);
        Ok(Self {
            cfg,
            embed: Linear::new(&mut store, &mut init, "head.embed", d, h, true),
            att_tanh: Linear::new(&mut store, &mut init, "head.attention.a", h, h, true),
            att_sigmoid: Linear::new(&mut store, &mut init, "head.attention.b", h, h, true),
            att_out: Linear::new(&mut store, &mut init, "head.attention.c", h, 1, true),
            classifier: Linear::new(&mut store, &mut init, "head.classifier", h, k, true),
            store,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Pool `N×D` instance features into one bag prediction.
    pub fn forward(&self, g: &mut Graph<T>, feats: NodeId) -> Result<PoolNodes> {
        self.forward_with(g, &self.store, feats)
    }

    /// [`Self::forward`] reading parameters from `s`, a store with this
    /// head's layout.
    pub fn forward_with(&self, g: &mut Graph<T>, s: &ParamStore<T>, feats: NodeId) -> Result<PoolNodes> {
        let shape = g.shape(feats).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.in_dim {
            return Err(CoreError::Shape(format!("head expects N×{}, got {shape:?}", self.cfg.in_dim)));
        }
        let n = shape[0];
        if n == 0 {
            return Err(CoreError::Missing("empty bag".into()));
        }
        let h = self.embed.forward(g, s, feats)?;
        let h = g.relu(h)?;
        let a = self.att_tanh.forward(g, s, h)?;
        let a = g.tanh(a)?;
        let b = self.att_sigmoid.forward(g, s, h)?;
        let b = g.sigmoid(b)?;
        let ab = g.mul(a, b)?;
        let scores = self.att_out.forward(g, s, ab)?;
        let scores = g.reshape(scores, &[1, n])?;
        let weights = g.softmax_last(scores)?;
        let embedding = g.matmul(weights, h)?;
        let logits = self.classifier.forward(g, s, embedding)?;
        Ok(PoolNodes {
            embedding,
            weights,
            logits,
        })
    }

    pub fn pool(&self, feats: &Tensor<T>) -> Result<Pooled<T>> {
        let mut g = Graph::inference();
        let x = g.constant(feats.clone());
        let p = self.forward(&mut g, x)?;
        Ok(Pooled {
            embedding: g.value(p.embedding).data().to_vec(),
            weights: g.value(p.weights).data().to_vec(),
            logits: g.value(p.logits).data().to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Container::from_store(&self.store, serde_json::json!({ "head": self.cfg }))?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let cfg: HeadConfig = serde_json::from_value(c.metadata["head"].clone())?;
        let mut h = Self::new(cfg, 0)?;
        c.load_into(&mut h.store)?;
        Ok(h)
    }
}

/// `(bag embedding, attention weights)` for `N×D` features.
pub fn attention_pool<T: Scalar>(features: &Tensor<T>, head: &AttentionMILHead<T>) -> Result<(Vec<T>, Vec<T>)> {
    let p = head.pool(features)?;
    Ok((p.embedding, p.weights))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `(1 − ε)·onehot(label) + ε/K`.
pub fn smoothed_target(label: usize, num_classes: usize, eps: f64) -> Vec<f64> {
    (0..num_classes)
        .map(|c| if c == label { 1.0 - eps + eps / num_classes as f64 } else { eps / num_classes as f64 })
        .collect()
}

/// Cross-entropy of one bag against its smoothed label.
pub fn bag_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, label: usize, num_classes: usize, eps: f64) -> Result<NodeId> {
    if label >= num_classes {
        return Err(CoreError::Shape(format!("label {label} with {num_classes} classes")));
    }
    let t: Vec<T> = smoothed_target(label, num_classes, eps).into_iter().map(T::from_f64).collect();
    Ok(g.cross_entropy(logits, &Tensor::from_vec([1, num_classes], t)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 5e-3,
            batch_size: 16,
            label_smoothing: 0.1,
            betas: (0.9, 0.999),
            weight_decay: 1e-2,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl HeadTrainConfig {
    fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Highest validation AUC, earliest epoch on ties; the last epoch when no
/// validation AUC exists.
pub fn best_epoch(logs: &[EpochLog]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for l in logs {
        if let Some(a) = l.val_auc {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((l.epoch, a));
            }
        }
    }
    best.map(|(e, _)| e).or_else(|| logs.last().map(|l| l.epoch))
}

fn snapshot<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
    store.named_arrays().into_iter().collect()
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn validation(head: &AttentionMILHead<f32>, val: &[&Bag]) -> (Option<f64>, Option<f64>) {
    if val.is_empty() {
        return (None, None);
    }
    match clam_eval(head, val) {
        Ok(e) => (Some(e.metrics.auc), Some(e.metrics.acc)),
        Err(_) => (None, None),
    }
}

/// Train `head` on bag features; restores the best epoch's parameters.
/// `on_step` sees the head and the optimizer report after every update.
pub fn train_head(
    head: &mut AttentionMILHead<f32>,
    train: &[&Bag],
    val: &[&Bag],
    cfg: &HeadTrainConfig,
    on_step: &mut dyn FnMut(&AttentionMILHead<f32>, &StepReport) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(CoreError::Missing("no training bags".into()));
    }
    let k = head.cfg.num_classes;
    let mut opt = AdamW::new(&head.store, cfg.adamw(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x04EA_D7A1));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, BTreeMap<String, Tensor<f32>>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let x = g.constant(train[i].features()?.clone());
                let p = head.forward(&mut g, x)?;
                losses.push(bag_loss(&mut g, p.logits, train[i].label, k, cfg.label_smoothing)?);
            }
            let loss = mean_of(&mut g, &losses)?;
            total += g.value(loss).item() as f64 * batch.len() as f64;
            let grads = g.backward(loss)?;
            let report = opt.step(&mut head.store, &grads, cfg.lr)?;
            on_step(head, &report)?;
        }
        let (val_auc, val_acc) = validation(head, val);
        if let Some(a) = val_auc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, snapshot(&head.store)));
            }
        }
        logs.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_auc,
            val_acc,
        });
    }
    if let Some((_, params)) = best {
        head.store.load_named(&params)?;
    }
    Ok(logs)
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(g.scale(acc, 1.0 / nodes.len() as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsRecord,
    pub scores: Vec<SlideScore>,
}

/// Slide-level ACC / AUC from attention-pooled predictions.
pub fn clam_eval(head: &AttentionMILHead<f32>, bags: &[&Bag]) -> Result<Evaluation> {
    let scores = bags
        .iter()
        .map(|b| {
            let p = head.pool(b.features()?)?;
            let logits: Vec<f64> = p.logits.iter().map(|&v| v as f64).collect();
            Ok(SlideScore {
                slide_id: b.slide_id.clone(),
                label: b.label,
                probs: softmax(&logits),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = scores.iter().map(|s| s.probs.clone()).collect();
    let labels: Vec<usize> = scores.iter().map(|s| s.label).collect();
    Ok(Evaluation {
        metrics: compute_metrics(&rows, &labels)?,
        scores,
    })
}

/// Top-`k` instances by scorer attention, tie-broken by lower index,
/// returned in ascending index order. `N ≤ k` keeps everything.
pub fn ib_select(bag: &Bag, k: usize, scorer: &AttentionMILHead<f32>) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(config("k must be ≥ 1"));
    }
    let feats = bag.features()?;
    let n = feats.dim(0);
    if n <= k {
        return Ok((0..n).collect());
    }
    let w = scorer.pool(feats)?.weights;
    Ok(top_k(&w, k))
}

pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = idx[..k.min(idx.len())].to_vec();
    keep.sort_unstable();
    keep
}

/// Fraction of selected instances that are tumor, over positive bags.
pub fn selection_precision(bags: &[&Bag], selections: &[Vec<usize>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (b, sel) in bags.iter().zip(selections) {
        if b.label == 1 {
            hit += sel.iter().filter(|&&i| b.tumor[i]).count();
            total += sel.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// `(positive bags whose argmax-attention instance is tumor, positive bags)`.
pub fn argmax_attention_hits(head: &AttentionMILHead<f32>, bags: &[&Bag]) -> Result<(usize, usize)> {
    let (mut hits, mut total) = (0, 0);
    for b in bags.iter().filter(|b| b.label == 1) {
        let w = head.pool(b.features()?)?.weights;
        let top = top_k(&w, 1)[0];
        total += 1;
        hits += usize::from(b.tumor[top]);
    }
    Ok((hits, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Reuse,
    Retrain,
    Etc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Instances kept per slide for end-to-end tuning.
    pub k: usize,
    pub student_lr: f64,
    pub head_lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// End-to-end epochs.
    pub epochs: usize,
    /// Epochs for heads trained on frozen features.
    pub head_epochs: usize,
    /// Epochs of the head trained on teacher features, which serves as the
    /// reuse head and the instance scorer.
    pub teacher_head_epochs: usize,
    pub hidden: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Etc,
            k: 512,
            student_lr: 1e-5,
            head_lr: 5e-3,
            batch_size: 16,
            label_smoothing: 0.1,
            epochs: 10,
            head_epochs: 30,
            teacher_head_epochs: 30,
            hidden: 64,
            betas: (0.9, 0.999),
            weight_decay: 1e-2,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config("k must be ≥ 1"));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(config("batch size and hidden width must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }

    pub fn head_train(&self, seed_key: u64) -> HeadTrainConfig {
        HeadTrainConfig {
            epochs: self.head_epochs,
            lr: self.head_lr,
            batch_size: self.batch_size,
            label_smoothing: self.label_smoothing,
            betas: self.betas,
            weight_decay: self.weight_decay,
            eps: self.eps,
            seed: derive_seed(self.seed, seed_key),
        }
    }
}

/// Hashes of the three parameter groups after one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub phase: String,
    pub step: usize,
    pub extractor: String,
    pub student: String,
    pub head: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hashes {
    pub extractor: String,
    pub student: String,
    pub head: String,
}

pub fn hashes(student: &Student<f32>, head: &AttentionMILHead<f32>) -> Hashes {
    Hashes {
        extractor: student.store.hash_prefix(EXTRACTOR),
        student: student.store.hash_where(|n| !n.starts_with(EXTRACTOR)),
        head: head.store.hash_prefix(""),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub before: Hashes,
    pub after: Hashes,
    pub steps: Vec<AuditRecord>,
}

impl Audit {
    fn record(&mut self, phase: &str, student: &Student<f32>, head: &AttentionMILHead<f32>) -> Hashes {
        let h = hashes(student, head);
        self.steps.push(AuditRecord {
            phase: phase.to_string(),
            step: self.steps.iter().filter(|r| r.phase == phase).count() + 1,
            extractor: h.extractor.clone(),
            student: h.student.clone(),
            head: h.head.clone(),
        });
        h
    }
}

/// Which groups changed between `before` and `after`.
pub fn changed(before: &Hashes, after: &Hashes) -> (bool, bool, bool) {
    (
        before.extractor != after.extractor,
        before.student != after.student,
        before.head != after.head,
    )
}

#[derive(Debug)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub student: Student<f32>,
    pub head: AttentionMILHead<f32>,
    pub val: Option<MetricsRecord>,
    pub test: MetricsRecord,
    pub test_scores: Vec<SlideScore>,
    pub epochs: Vec<EpochLog>,
    pub head_epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub audit: Audit,
    pub selections: BTreeMap<String, Vec<usize>>,
    /// Test bags carrying the final student's features.
    pub test_bags: Vec<Bag>,
}

fn metrics_for(head: &AttentionMILHead<f32>, bags: &[&Bag], split_name: &str, epoch: Option<usize>) -> Result<Option<Evaluation>> {
    if bags.is_empty() {
        return Ok(None);
    }
    let mut e = clam_eval(head, bags)?;
    e.metrics.split = split_name.to_string();
    e.metrics.epoch = epoch;
    Ok(Some(e))
}

/// Run one fine-tuning strategy.
///
/// `bags` carry preprocessed images; for `etc` they must also carry the
/// teacher features that `scorer` ranks. `teacher_head` is required for
/// `reuse`.
pub fn run_strategy(
    cfg: &StrategyConfig,
    student: Student<f32>,
    bags: &[Bag],
    teacher_head: Option<&AttentionMILHead<f32>>,
    scorer: Option<&AttentionMILHead<f32>>,
) -> Result<StrategyOutcome> {
    cfg.validate()?;
    for b in bags {
        b.validate()?;
    }
    match cfg.strategy {
        Strategy::Reuse => run_reuse(cfg, student, bags, teacher_head),
        Strategy::Retrain => run_retrain(cfg, student, bags),
        Strategy::Etc => run_etc(cfg, student, bags, scorer),
    }
}

/// Fixed `D_t×D` adapter: identity on the shared leading coordinates.
pub fn identity_adapter(features: &Tensor<f32>, out_dim: usize) -> Result<Tensor<f32>> {
    let (n, d) = (features.dim(0), features.dim(1));
    let data = (0..n * out_dim)
        .map(|i| {
            let (r, c) = (i / out_dim, i % out_dim);
            if c < d {
                features.data()[r * d + c]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec([n, out_dim], data)?)
}

fn run_reuse(
    cfg: &StrategyConfig,
    student: Student<f32>,
    bags: &[Bag],
    teacher_head: Option<&AttentionMILHead<f32>>,
) -> Result<StrategyOutcome> {
    let head = teacher_head
        .ok_or_else(|| CoreError::Missing("reuse needs the teacher-trained head".into()))?
        .clone();
    let before = hashes(&student, &head);
    let mut featured = with_student_features(bags, &student)?;
    if student.spec.teacher_dim != head.cfg.in_dim {
        for b in &mut featured {
            b.features = Some(identity_adapter(b.features()?, head.cfg.in_dim)?);
        }
    }
    let val = metrics_for(&head, &split(&featured, "val"), "val", None)?;
    let test = metrics_for(&head, &split(&featured, "test"), "test", None)?
        .ok_or_else(|| CoreError::Missing("no test bags".into()))?;
    let after = hashes(&student, &head);
    if before != after {
        return Err(CoreError::Contract("reuse changed parameters".into()));
    }
    let _ = cfg;
    Ok(StrategyOutcome {
        strategy: Strategy::Reuse,
        student,
        head,
        val: val.map(|e| e.metrics),
        test: test.metrics,
        test_scores: test.scores,
        epochs: vec![],
        head_epochs: vec![],
        best_epoch: None,
        audit: Audit {
            before,
            after,
            steps: vec![],
        },
        selections: BTreeMap::new(),
        test_bags: featured.into_iter().filter(|b| b.split == "test").collect(),
    })
}

/// Train a fresh head on frozen student features, auditing every step.
fn fresh_head_phase(
    cfg: &StrategyConfig,
    student: &Student<f32>,
    featured: &[Bag],
    audit: &mut Audit,
    phase: &str,
    seed_key: u64,
) -> Result<(AttentionMILHead<f32>, Vec<EpochLog>)> {
    let hc = HeadConfig {
        in_dim: student.spec.teacher_dim,
        hidden: cfg.hidden,
        num_classes: 2,
    };
    let mut head = AttentionMILHead::new(hc, derive_seed(cfg.seed, seed_key))?;
    let frozen = hashes(student, &head);
    let head_ids: Vec<ParamId> = head.store.ids().collect();
    let train = split(featured, "train");
    let val = split(featured, "val");
    let logs = train_head(&mut head, &train, &val, &cfg.head_train(seed_key), &mut |h, report| {
        if report.updated.iter().any(|id| !head_ids.contains(id)) {
            return Err(CoreError::Contract(format!("{phase}: update outside the head")));
        }
        let now = audit.record(phase, student, h);
        if now.extractor != frozen.extractor || now.student != frozen.student {
            return Err(CoreError::Contract(format!("{phase}: frozen student changed")));
        }
        Ok(())
    })?;
    if hashes(student, &head).head == frozen.head {
        return Err(CoreError::Contract(format!("{phase}: head was not updated")));
    }
    Ok((head, logs))
}

fn run_retrain(cfg: &StrategyConfig, student: Student<f32>, bags: &[Bag]) -> Result<StrategyOutcome> {
    let featured = with_student_features(bags, &student)?;
    let placeholder = AttentionMILHead::new(
        HeadConfig {
            in_dim: student.spec.teacher_dim,
            hidden: cfg.hidden,
            num_classes: 2,
        },
        derive_seed(cfg.seed, 0x7E7A),
    )?;
    let mut audit = Audit {
        before: hashes(&student, &placeholder),
        after: hashes(&student, &placeholder),
        steps: vec![],
    };
    let (head, logs) = fresh_head_phase(cfg, &student, &featured, &mut audit, "retrain", 0x7E7A)?;
    audit.after = hashes(&student, &head);
    let best = best_epoch(&logs);
    let val = metrics_for(&head, &split(&featured, "val"), "val", best)?;
    let test = metrics_for(&head, &split(&featured, "test"), "test", best)?
        .ok_or_else(|| CoreError::Missing("no test bags".into()))?;
    Ok(StrategyOutcome {
        strategy: Strategy::Retrain,
        student,
        head,
        val: val.map(|e| e.metrics),
        test: test.metrics,
        test_scores: test.scores,
        epochs: vec![],
        head_epochs: logs,
        best_epoch: best,
        audit,
        selections: BTreeMap::new(),
        test_bags: featured.into_iter().filter(|b| b.split == "test").collect(),
    })
}

/// Per-bag instance input for the trainable part of the student: cached
/// extractor outputs when the extractor is frozen, raw images otherwise.
fn student_inputs(student: &Student<f32>, bags: &[Bag]) -> Result<Vec<Tensor<f32>>> {
    bags.par_iter()
        .map(|b| {
            if student.spec.extractor_frozen {
                student.extract_batch(b.images()?, 64)
            } else {
                Ok(b.images()?.clone())
            }
        })
        .collect()
}

fn student_forward(g: &mut Graph<f32>, student: &Student<f32>, input: Tensor<f32>) -> Result<NodeId> {
    let x = g.constant(input);
    if student.spec.extractor_frozen {
        student.forward_from_extracted(g, x, Mode::Eval)
    } else {
        student.forward(g, x, Mode::Eval)
    }
}

fn features_from_inputs(student: &Student<f32>, bags: &[Bag], inputs: &[Tensor<f32>]) -> Result<Vec<Bag>> {
    bags.par_iter()
        .zip(inputs)
        .map(|(b, x)| {
            let mut g = Graph::inference();
            let f = student_forward(&mut g, student, x.clone())?;
            b.with_features(g.value(f).clone())
        })
        .collect()
}

fn run_etc(
    cfg: &StrategyConfig,
    mut student: Student<f32>,
    bags: &[Bag],
    scorer: Option<&AttentionMILHead<f32>>,
) -> Result<StrategyOutcome> {
    let scorer = scorer.ok_or_else(|| CoreError::Missing("end-to-end tuning needs an instance scorer".into()))?;
    let mut selections = BTreeMap::new();
    let mut sel_list = Vec::with_capacity(bags.len());
    for b in bags {
        let s = ib_select(b, cfg.k, scorer)?;
        selections.insert(b.slide_id.clone(), s.clone());
        sel_list.push(s);
    }
    let inputs = student_inputs(&student, bags)?;
    let hc = HeadConfig {
        in_dim: student.spec.teacher_dim,
        hidden: cfg.hidden,
        num_classes: 2,
    };
    let mut head = AttentionMILHead::new(hc, derive_seed(cfg.seed, 0xE7C))?;
    let before = hashes(&student, &head);
    let mut audit = Audit {
        before: before.clone(),
        after: before.clone(),
        steps: vec![],
    };
    let extractor_ids: Vec<ParamId> = student
        .store
        .ids()
        .filter(|&id| student.store.param(id).name.starts_with(EXTRACTOR))
        .collect();

    let head_cfg = cfg.head_train(0xE7C);
    let mut s_opt = AdamW::new(&student.store, head_cfg.adamw(cfg.student_lr));
    let mut h_opt = AdamW::new(&head.store, head_cfg.adamw(cfg.head_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE7C0));
    let train: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].split == "train").collect();
    let val: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].split == "val").collect();
    if train.is_empty() {
        return Err(CoreError::Missing("no training bags".into()));
    }
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, BTreeMap<String, Tensor<f32>>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &j in &batch {
                let i = train[j];
                let x = inputs[i].select_first(&sel_list[i])?;
                let f = student_forward(&mut g, &student, x)?;
                let p = head.forward(&mut g, f)?;
                losses.push(bag_loss(&mut g, p.logits, bags[i].label, 2, cfg.label_smoothing)?);
            }
            let loss = mean_of(&mut g, &losses)?;
            total += g.value(loss).item() as f64 * batch.len() as f64;
            let grads = g.backward(loss)?;
            let sr = s_opt.step(&mut student.store, &grads, cfg.student_lr)?;
            h_opt.step(&mut head.store, &grads, cfg.head_lr)?;
            if student.spec.extractor_frozen && sr.updated.iter().any(|id| extractor_ids.contains(id)) {
                return Err(CoreError::Contract("end-to-end step updated the frozen extractor".into()));
            }
            let now = audit.record("end-to-end", &student, &head);
            if student.spec.extractor_frozen && now.extractor != before.extractor {
                return Err(CoreError::Contract("frozen extractor changed during end-to-end tuning".into()));
            }
        }
        let val_bags: Vec<Bag> = val.iter().map(|&i| bags[i].clone()).collect();
        let val_inputs: Vec<Tensor<f32>> = val.iter().map(|&i| inputs[i].clone()).collect();
        let featured = features_from_inputs(&student, &val_bags, &val_inputs)?;
        let (val_auc, val_acc) = validation(&head, &featured.iter().collect::<Vec<_>>());
        if let Some(a) = val_auc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, snapshot(&student.store)));
            }
        }
        logs.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_auc,
            val_acc,
        });
    }
    if let Some((_, params)) = best {
        student.store.load_named(&params)?;
    }
    let tuned = hashes(&student, &head);
    if cfg.epochs > 0 && tuned.student == before.student {
        return Err(CoreError::Contract("end-to-end tuning left the student unchanged".into()));
    }

    let featured = features_from_inputs(&student, bags, &inputs)?;
    let (fresh, head_logs) = fresh_head_phase(cfg, &student, &featured, &mut audit, "fresh-head", 0xF4E5)?;
    audit.after = hashes(&student, &fresh);
    let best_e2e = best_epoch(&logs);
    let best_head = best_epoch(&head_logs);
    let val = metrics_for(&fresh, &split(&featured, "val"), "val", best_head)?;
    let test = metrics_for(&fresh, &split(&featured, "test"), "test", best_head)?
        .ok_or_else(|| CoreError::Missing("no test bags".into()))?;
    Ok(StrategyOutcome {
        strategy: Strategy::Etc,
        student,
        head: fresh,
        val: val.map(|e| e.metrics),
        test: test.metrics,
        test_scores: test.scores,
        epochs: logs,
        head_epochs: head_logs,
        best_epoch: best_e2e,
        audit,
        selections,
        test_bags: featured.into_iter().filter(|b| b.split == "test").collect(),
    })
}

/// Head trained on teacher features: the teacher's MIL head for `reuse`
/// and the instance scorer for selection.
pub fn train_teacher_head(
    teacher_bags: &[Bag],
    hidden: usize,
    cfg: &HeadTrainConfig,
) -> Result<(AttentionMILHead<f32>, Vec<EpochLog>)> {
    let first = teacher_bags.first().ok_or_else(|| CoreError::Missing("no bags".into()))?;
    let hc = HeadConfig {
        in_dim: first.features()?.dim(1),
        hidden,
        num_classes: 2,
    };
    let mut head = AttentionMILHead::new(hc, derive_seed(cfg.seed, 0x7EAC_4EAD))?;
    let logs = train_head(
        &mut head,
        &split(teacher_bags, "train"),
        &split(teacher_bags, "val"),
        cfg,
        &mut |_, _| Ok(()),
    )?;
    Ok((head, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub version: u32,
    pub slide_id: String,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    /// All weights equal: every cell is 0.5.
    pub degenerate: bool,
    pub cells: Vec<HeatmapCell>,
}

/// Min-max normalized attention on the patch grid: `stem.pgm` (8-bit P5,
/// empty cells 0) and `stem.json`.
pub fn export_heatmap(bag: &Bag, weights: &[f32], stem: &Path) -> Result<HeatmapSidecar> {
    if weights.len() != bag.len() || bag.is_empty() {
        return Err(CoreError::Shape(format!("{} weights for {} instances", weights.len(), bag.len())));
    }
    let size = bag.coords[0].size;
    let (rows, cols) = (bag.height / size, bag.width / size);
    let lo = weights.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = weights.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let degenerate = hi == lo;
    let mut grid = vec![0u8; rows * cols];
    let mut cells = Vec::with_capacity(bag.len());
    for (c, &w) in bag.coords.iter().zip(weights) {
        if c.size != size || c.x % size != 0 || c.y % size != 0 || c.x / size >= cols || c.y / size >= rows {
            return Err(CoreError::Shape(format!(
                "patch ({}, {}) off the {rows}×{cols} grid of {}",
                c.x, c.y, bag.slide_id
            )));
        }
        let value = if degenerate { 0.5 } else { (w as f64 - lo) / (hi - lo) };
        grid[(c.y / size) * cols + c.x / size] = (value * 255.0).round() as u8;
        cells.push(HeatmapCell {
            x: c.x,
            y: c.y,
            weight: w as f64,
            value,
        });
    }
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    pgm.extend_from_slice(&grid);
    std::fs::write(stem.with_extension("pgm"), pgm)?;
    let sidecar = HeatmapSidecar {
        version: 1,
        slide_id: bag.slide_id.clone(),
        rows,
        cols,
        patch_size: size,
        degenerate,
        cells,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(d: usize) -> AttentionMILHead<f64> {
        AttentionMILHead::new(
            HeadConfig {
                in_dim: d,
                hidden: 6,
                num_classes: 2,
            },
            1,
        )
        .unwrap()
    }

    fn feats(n: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn([n, d], |i| ((i * 7919) % 113) as f64 / 50.0 - 1.0)
    }

    #[test]
    fn single_instance_gets_all_weight() {
        let (_, w) = attention_pool(&feats(1, 4), &head(4)).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn empty_bag_is_an_error() {
        assert!(attention_pool(&Tensor::<f64>::zeros([0, 4]), &head(4)).is_err());
    }

    #[test]
    fn smoothing_hand_case() {
        let t = smoothed_target(1, 2, 0.1);
        assert!((t[1] - 0.95).abs() < 1e-15 && (t[0] - 0.05).abs() < 1e-15);
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_vec([1, 2], vec![0.0, 0.0]).unwrap());
        let loss = bag_loss(&mut g, l, 1, 2, 0.1).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = g.constant(Tensor::from_vec([1, 2], vec![0.0, 2.0]).unwrap());
        let loss = bag_loss(&mut g, l, 1, 2, 0.1).unwrap();
        let lse = (1.0 + 2f64.exp()).ln();
        let want = -(0.05 * (0.0 - lse) + 0.95 * (2.0 - lse));
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn top_k_tie_break() {
        assert_eq!(top_k(&[0.1, 0.5, 0.5, 0.9], 2), vec![1, 3]);
        assert_eq!(top_k(&[0.2, 0.2, 0.2], 2), vec![0, 1]);
    }

    #[test]
    fn best_epoch_rule() {
        let log = |epoch, a: Option<f64>| EpochLog {
            epoch,
            train_loss: 0.0,
            val_auc: a,
            val_acc: None,
        };
        assert_eq!(best_epoch(&[log(1, Some(0.7)), log(2, Some(0.9)), log(3, Some(0.9))]), Some(2));
        assert_eq!(best_epoch(&[log(1, None), log(2, None)]), Some(2));
    }

    fn bag(n: usize) -> Bag {
        Bag {
            slide_id: "s".into(),
            label: 1,
            split: "test".into(),
            width: 1024,
            height: 768,
            coords: (0..n)
                .map(|i| PatchCoord {
                    x: (i % 4) * 256,
                    y: (i / 4) * 256,
                    size: 256,
                    coverage: 1.0,
                })
                .collect(),
            instance_ids: (0..n).map(|i| format!("s/p{i}")).collect(),
            tumor: vec![false; n],
            images: None,
            features: None,
        }
    }

    #[test]
    fn heatmap_grid_and_degenerate_case() {
        let dir = tempfile::tempdir().unwrap();
        let b = bag(5);
        let side = export_heatmap(&b, &[0.2; 5], &dir.path().join("h")).unwrap();
        assert!(side.degenerate);
        assert!(side.cells.iter().all(|c| c.value == 0.5));
        let pgm = std::fs::read(dir.path().join("h.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(pgm.len(), 11 + 12);
        let side = export_heatmap(&b, &[0.1, 0.3, 0.2, 0.2, 0.2], &dir.path().join("g")).unwrap();
        assert_eq!(side.cells[1].value, 1.0);
        assert_eq!(side.cells[0].value, 0.0);
        let mut off = bag(1);
        off.coords[0].x = 1024;
        assert!(export_heatmap(&off, &[1.0], &dir.path().join("x")).is_err());
    }

    #[test]
    fn selection_keeps_everything_for_small_bags() {
        let scorer = AttentionMILHead::<f32>::new(
            HeadConfig {
                in_dim: 3,
                hidden: 4,
                num_classes: 2,
            },
            0,
        )
        .unwrap();
        let b = bag(5).with_features(Tensor::from_fn([5, 3], |i| i as f32 * 0.1)).unwrap();
        assert_eq!(ib_select(&b, 512, &scorer).unwrap(), vec![0, 1, 2, 3, 4]);
        let sel = ib_select(&b, 2, &scorer).unwrap();
        assert_eq!(sel.len(), 2);
        assert!(sel.windows(2).all(|w| w[0] < w[1]));
        assert!(ib_select(&bag(5), 2, &scorer).is_err());
    }
}
