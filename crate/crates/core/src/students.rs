//! Student architectures and teachers.
//!
//! * FPD: frozen stem+stage-1 extractor → 4×4/4 projection conv → TransScan
//!   stack → spatial mean → linear `dim → D_t`.
//! * VFD: trainable stem+stages 1–3 extractor → spatial mean → linear
//!   `1024 → D_t`.
//! * Frozen-random teacher: a fixed-seed three-conv network with pooling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use efcm_tensor::nn::{Conv2d, Linear, Mode};
use efcm_tensor::{derive_seed, Container, ConvGeometry, FeatureStore, Graph, Init, NodeId, ParamStore, Scalar, Tensor};

use crate::error::{config, CoreError, Result};
use crate::resnet::{ExtractorDepth, ResNetExtractor};
use crate::scan::ScanConfig;
use crate::transformer::{TransScanConfig, TransScanStack};

/// Prefix of the shallow extractor's parameters inside a student store.
pub const EXTRACTOR: &str = "extractor.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fpd,
    Vfd,
    TeacherFrozenRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    #[serde(default = "d224")]
    pub input_size: usize,
    #[serde(default = "d384")]
    pub dim: usize,
    #[serde(default = "d3")]
    pub depth: usize,
    /// 0 means `max(1, dim/64)`.
    #[serde(default)]
    pub heads: usize,
    #[serde(default = "d4")]
    pub mlp_ratio: usize,
    #[serde(default = "d32")]
    pub groups: usize,
    #[serde(default = "d32")]
    pub reduced: usize,
    #[serde(default = "d1024")]
    pub teacher_dim: usize,
    #[serde(default = "dtrue")]
    pub extractor_frozen: bool,
}

fn d224() -> usize {
    224
}
fn d384() -> usize {
    384
}
fn d3() -> usize {
    3
}
fn d4() -> usize {
    4
}
fn d32() -> usize {
    32
}
fn d1024() -> usize {
    1024
}
fn dtrue() -> bool {
    true
}

impl ModelSpec {
    pub fn fpd(dim: usize, depth: usize) -> Self {
        Self {
            variant: Variant::Fpd,
            input_size: 224,
            dim,
            depth,
            heads: 0,
            mlp_ratio: 4,
            groups: 32,
            reduced: 32,
            teacher_dim: 1024,
            extractor_frozen: true,
        }
    }

    pub fn vfd() -> Self {
        Self {
            variant: Variant::Vfd,
            extractor_frozen: false,
            ..Self::fpd(384, 3)
        }
    }

    pub fn teacher(input_size: usize, teacher_dim: usize) -> Self {
        Self {
            variant: Variant::TeacherFrozenRandom,
            input_size,
            teacher_dim,
            ..Self::fpd(384, 3)
        }
    }

    /// Reduced FPD used for training runs on a single CPU: 32×32 inputs,
    /// width 64, depth 2, 8 groups, 8-wide squeeze, 64-wide teacher space.
    pub fn desk_fpd() -> Self {
        Self {
            input_size: 32,
            dim: 64,
            depth: 2,
            groups: 8,
            reduced: 8,
            teacher_dim: 64,
            ..Self::fpd(64, 2)
        }
    }

    pub fn heads(&self) -> usize {
        if self.heads == 0 {
            (self.dim / 64).max(1)
        } else {
            self.heads
        }
    }

    pub fn transscan(&self) -> TransScanConfig {
        TransScanConfig {
            dim: self.dim,
            depth: self.depth,
            heads: self.heads(),
            mlp_ratio: self.mlp_ratio,
            scan: ScanConfig {
                channels: self.dim,
                groups: self.groups,
                reduced: self.reduced,
            },
        }
    }

    pub fn extractor_depth(&self) -> ExtractorDepth {
        match self.variant {
            Variant::Vfd => ExtractorDepth::Layer3,
            _ => ExtractorDepth::Layer1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(config(format!("input size {} must be a positive multiple of 16", self.input_size)));
        }
        if self.teacher_dim == 0 {
            return Err(config("teacher dim must be ≥ 1"));
        }
        if self.variant == Variant::Fpd {
            self.transscan().validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Student<T: Scalar> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub extractor: ResNetExtractor,
    pub proj: Option<Conv2d>,
    pub blocks: Option<TransScanStack>,
    pub head: Linear,
}

impl<T: Scalar> Student<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(derive_seed(seed, 0x5747));
        let extractor = ResNetExtractor::new(&mut store, &mut init, "extractor", spec.extractor_depth())?;
        let (proj, blocks, head_in) = match spec.variant {
            Variant::Fpd => {
                let proj = Conv2d::new(&mut store, &mut init, "proj", 256, spec.dim, 4, ConvGeometry::new(4, 0, 1, 1), true)?;
                let blocks = TransScanStack::new(&mut store, &mut init, "blocks", spec.transscan())?;
                (Some(proj), Some(blocks), spec.dim)
            }
            Variant::Vfd => (None, None, 1024),
            Variant::TeacherFrozenRandom => {
                return Err(config("a teacher spec cannot build a student"));
            }
        };
        let head = Linear::new(&mut store, &mut init, "head", head_in, spec.teacher_dim, true);
        if spec.extractor_frozen {
            store.set_trainable_prefix(EXTRACTOR, false);
        }
        Ok(Self {
            spec,
            store,
            extractor,
            proj,
            blocks,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn extractor_mode(&self, mode: Mode) -> Mode {
        if self.spec.extractor_frozen {
            Mode::Eval
        } else {
            mode
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(CoreError::Shape(format!("student expects N×3×{s}×{s}, got {shape:?}")));
        }
        Ok(())
    }

    /// Shallow extractor output.
    pub fn extract(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        self.check_input(g.shape(x))?;
        let m = self.extractor_mode(mode);
        self.extractor.forward(g, &self.store, x, m)
    }

    /// Everything after the extractor.
    pub fn forward_from_extracted(&self, g: &mut Graph<T>, h: NodeId, mode: Mode) -> Result<NodeId> {
        let mut h = h;
        if let (Some(proj), Some(blocks)) = (&self.proj, &self.blocks) {
            h = proj.forward(g, &self.store, h)?;
            h = blocks.forward(g, &self.store, h, mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, &self.store, pooled).map_err(CoreError::from)
    }

    /// `F_s` for a batch `N×3×S×S`.
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let h = self.extract(g, x, mode)?;
        self.forward_from_extracted(g, h, mode)
    }

    /// Inference-mode features for a batch, evaluated in chunks.
    pub fn embed(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let n = images.dim(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let mut g = Graph::inference();
            let x = g.constant(images.narrow_first(start, len)?);
            let y = self.forward(&mut g, x, Mode::Eval)?;
            parts.push(g.value(y).clone());
            start += len;
        }
        Ok(Tensor::stack_first(&parts)?.reshape([n, self.spec.teacher_dim])?)
    }

    /// Inference-mode extractor output for a batch.
    pub fn extract_batch(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let n = images.dim(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let mut g = Graph::inference();
            let x = g.constant(images.narrow_first(start, len)?);
            let y = self.extract(&mut g, x, Mode::Eval)?;
            parts.push(g.value(y).clone());
            start += len;
        }
        let mut shape = parts[0].shape().to_vec();
        shape[0] = n;
        Ok(Tensor::stack_first(&parts)?.reshape(shape)?)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "spec": self.spec, "extra": extra });
        Container::from_store(&self.store, meta)?.save(path)?;
        Ok(())
    }

    /// Rebuild from a checkpoint written by [`Student::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let spec: ModelSpec = serde_json::from_value(c.metadata["spec"].clone())?;
        let mut s = Self::new(spec, 0)?;
        c.load_into(&mut s.store)?;
        Ok(s)
    }
}

/// Fixed-seed random convolutional teacher.
#[derive(Debug, Clone)]
pub struct RandomTeacher {
    pub spec: ModelSpec,
    pub store: ParamStore<f32>,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl RandomTeacher {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.variant != Variant::TeacherFrozenRandom {
            return Err(config("teacher requires variant teacher-frozen-random"));
        }
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(derive_seed(seed, 0x7EAC));
        let widths = [3, 32, 64, 128];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut store, &mut init, &format!("conv{i}"), w[0], w[1], 3, ConvGeometry::new(2, 1, 1, 1), true))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = Linear::new(&mut store, &mut init, "head", 128, spec.teacher_dim, true);
        store.set_all_trainable(false);
        Ok(Self { spec, store, convs, head })
    }

    pub fn forward(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.spec.input_size;
        if images.ndim() != 4 || images.shape()[1..] != [3, s, s] {
            return Err(CoreError::Shape(format!("teacher expects N×3×{s}×{s}, got {:?}", images.shape())));
        }
        let mut g = Graph::inference();
        let mut h = g.constant(images.clone());
        for c in &self.convs {
            h = c.forward(&mut g, &self.store, h)?;
            h = g.relu(h)?;
        }
        let p = g.global_avg_pool(h)?;
        let y = self.head.forward(&mut g, &self.store, p)?;
        Ok(g.value(y).clone())
    }
}

/// Source of teacher features `F_t`.
#[derive(Debug, Clone)]
pub enum Teacher {
    FrozenRandom(Box<RandomTeacher>),
    /// Precomputed features keyed by sample id.
    File(FeatureStore),
}

impl Teacher {
    /// Features for samples `ids` whose images are `images`.
    pub fn features(&self, ids: &[String], images: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Teacher::FrozenRandom(t) => {
                let mut parts = Vec::new();
                let n = images.dim(0);
                let mut start = 0;
                while start < n {
                    let len = 64.min(n - start);
                    parts.push(t.forward(&images.narrow_first(start, len)?)?);
                    start += len;
                }
                Ok(Tensor::stack_first(&parts)?.reshape([n, t.spec.teacher_dim])?)
            }
            Teacher::File(fs) => {
                let rows = ids
                    .iter()
                    .map(|id| fs.get(id).map_err(|_| CoreError::Missing(format!("teacher features for sample {id}"))))
                    .collect::<Result<Vec<_>>>()?;
                let d = rows.first().map(|r| r.len()).unwrap_or(0);
                let flat: Vec<f32> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
                Ok(Tensor::from_vec([rows.len(), d], flat)?)
            }
        }
    }
}
