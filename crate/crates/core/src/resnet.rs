//! Randomly initialized ResNet-50-shaped convolutional extractors (bottleneck
//! v1.5, stride on the 3×3), truncated after the first or third stage.

use serde::{Deserialize, Serialize};

use efcm_tensor::nn::{BatchNorm, Conv2d, Mode};
use efcm_tensor::{ConvGeometry, Graph, Init, NodeId, ParamStore, Scalar};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorDepth {
    /// Stem + stage 1: 256 channels at stride 4.
    Layer1,
    /// Stem + stages 1–3: 1024 channels at stride 16.
    Layer3,
}

impl ExtractorDepth {
    pub fn out_channels(self) -> usize {
        match self {
            ExtractorDepth::Layer1 => 256,
            ExtractorDepth::Layer3 => 1024,
        }
    }

    pub fn reduction(self) -> usize {
        match self {
            ExtractorDepth::Layer1 => 4,
            ExtractorDepth::Layer3 => 16,
        }
    }

    /// `(blocks, width, stride)` per stage.
    pub fn stages(self) -> &'static [(usize, usize, usize)] {
        const ALL: [(usize, usize, usize); 3] = [(3, 64, 1), (4, 128, 2), (6, 256, 2)];
        match self {
            ExtractorDepth::Layer1 => &ALL[..1],
            ExtractorDepth::Layer3 => &ALL[..],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub conv3: Conv2d,
    pub bn3: BatchNorm,
    pub downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        in_ch: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let out = width * 4;
        let conv = |store: &mut ParamStore<T>, init: &mut Init, name: &str, i, o, k, geom| {
            Conv2d::new(store, init, &format!("{prefix}.{name}"), i, o, k, geom, false)
        };
        let downsample = if stride != 1 || in_ch != out {
            Some((
                conv(store, init, "downsample.0", in_ch, out, 1, ConvGeometry::new(stride, 0, 1, 1))?,
                BatchNorm::new(store, &format!("{prefix}.downsample.1"), out),
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(store, init, "conv1", in_ch, width, 1, ConvGeometry::default())?,
            bn1: BatchNorm::new(store, &format!("{prefix}.bn1"), width),
            conv2: conv(store, init, "conv2", width, width, 3, ConvGeometry::new(stride, 1, 1, 1))?,
            bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), width),
            conv3: conv(store, init, "conv3", width, out, 1, ConvGeometry::default())?,
            bn3: BatchNorm::new(store, &format!("{prefix}.bn3"), out),
            downsample,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h, mode)?;
        let h = g.relu(h)?;
        let h = self.conv3.forward(g, store, h)?;
        let h = self.bn3.forward(g, store, h, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s, mode)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNetExtractor {
    pub depth: ExtractorDepth,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub stages: Vec<Vec<Bottleneck>>,
}

impl ResNetExtractor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, depth: ExtractorDepth) -> Result<Self> {
        let conv1 = Conv2d::new(store, init, &format!("{prefix}.conv1"), 3, 64, 7, ConvGeometry::new(2, 3, 1, 1), false)?;
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), 64);
        let mut in_ch = 64;
        let mut stages = Vec::new();
        for (si, &(blocks, width, stride)) in depth.stages().iter().enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let s = if bi == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(store, init, &format!("{prefix}.layer{}.{bi}", si + 1), in_ch, width, s)?);
                in_ch = width * 4;
            }
            stages.push(stage);
        }
        Ok(Self {
            depth,
            conv1,
            bn1,
            stages,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h)?;
        let mut h = g.max_pool2d(h, 3, 2, 1)?;
        for stage in &self.stages {
            for b in stage {
                h = b.forward(g, store, h, mode)?;
            }
        }
        Ok(h)
    }
}
