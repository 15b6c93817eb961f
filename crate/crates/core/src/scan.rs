//! Selective convolutional attention (SCAN).
//!
//! Two grouped 3×3 branches (dilation 1 and 2) are fused by a per-channel
//! two-way softmax driven by a squeezed global descriptor; a one-channel
//! sigmoid mask adds spatial attention and the block is residual:
//!
//! ```text
//! Ũ = F̃(X), Û = F̂(X), U = Ũ + Û
//! z = relu(BN(fc(gap(U))))
//! a = softmax(Az, Bz)₀, b = 1 − a, V = a·Ũ + b·Û
//! U′ = U ⊙ σ(conv₁ₓ₁(U))
//! X′ = X + U′ + V
//! ```

use serde::{Deserialize, Serialize};

use efcm_tensor::nn::{BatchNorm, Conv2d, Linear, Mode};
use efcm_tensor::{ConvGeometry, Graph, Init, NodeId, ParamStore, Scalar};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub channels: usize,
    /// Group count of both branch convolutions.
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Width of the squeezed descriptor `z`.
    #[serde(default = "default_reduced")]
    pub reduced: usize,
}

fn default_groups() -> usize {
    32
}

fn default_reduced() -> usize {
    32
}

impl ScanConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            groups: default_groups(),
            reduced: default_reduced(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(config(format!(
                "SCAN channels ({}) must be a positive multiple of groups ({})",
                self.channels, self.groups
            )));
        }
        if self.reduced == 0 {
            return Err(config("SCAN reduced dim must be ≥ 1"));
        }
        Ok(())
    }

    pub fn branch1_geometry(&self) -> ConvGeometry {
        ConvGeometry::new(1, 1, 1, self.groups)
    }

    pub fn branch2_geometry(&self) -> ConvGeometry {
        ConvGeometry::new(1, 2, 2, self.groups)
    }
}

/// Nodes produced by [`ScanBlock::channel_select`].
#[derive(Debug, Clone, Copy)]
pub struct ChannelSelection {
    pub v: NodeId,
    pub a: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone)]
pub struct ScanBlock {
    pub cfg: ScanConfig,
    pub branch1: Conv2d,
    pub branch2: Conv2d,
    pub fc: Linear,
    pub bn: BatchNorm,
    pub a: Linear,
    pub b: Linear,
    pub spatial: Conv2d,
}

impl ScanBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: ScanConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.channels, cfg.reduced);
        Ok(Self {
            cfg,
            branch1: Conv2d::new(store, init, &format!("{prefix}.branch1"), c, c, 3, cfg.branch1_geometry(), true)?,
            branch2: Conv2d::new(store, init, &format!("{prefix}.branch2"), c, c, 3, cfg.branch2_geometry(), true)?,
            fc: Linear::new(store, init, &format!("{prefix}.fc"), c, d, true),
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), d),
            a: Linear::new(store, init, &format!("{prefix}.A"), d, c, true),
            b: Linear::new(store, init, &format!("{prefix}.B"), d, c, true),
            spatial: Conv2d::new(store, init, &format!("{prefix}.spatial"), c, 1, 1, ConvGeometry::default(), true)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.branch1.num_params()
            + self.branch2.num_params()
            + self.fc.num_params()
            + self.bn.num_params()
            + self.a.num_params()
            + self.b.num_params()
            + self.spatial.num_params()
    }

    /// `(Ũ, Û)`: dilation-1 and dilation-2 grouped 3×3 convolutions.
    pub fn branch_transforms<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let ut = self.branch1.forward(g, store, x)?;
        let uh = self.branch2.forward(g, store, x)?;
        Ok((ut, uh))
    }

    /// Channel-wise selection between the branches.
    pub fn channel_select<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ut: NodeId,
        uh: NodeId,
        mode: Mode,
    ) -> Result<ChannelSelection> {
        let u = g.add(ut, uh)?;
        let s = g.global_avg_pool(u)?;
        let z = self.fc.forward(g, store, s)?;
        let z = self.bn.forward(g, store, z, mode)?;
        let z = g.relu(z)?;
        let la = self.a.forward(g, store, z)?;
        let lb = self.b.forward(g, store, z)?;
        // two-way softmax: exp(la)/(exp(la)+exp(lb)) == σ(la − lb)
        let diff = g.sub(la, lb)?;
        let a = g.sigmoid(diff)?;
        let b = g.one_minus(a)?;
        // a⊙Ũ + b⊙Û with a + b = 1, written so equal branches give V = Ũ exactly
        let d = g.sub(uh, ut)?;
        let bd = g.mul_channel(d, b)?;
        let v = g.add(ut, bd)?;
        Ok(ChannelSelection { v, a, b })
    }

    /// `U ⊙ σ(conv₁ₓ₁(U))` with the one-channel mask shared by all channels.
    pub fn spatial_attend<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, u: NodeId) -> Result<NodeId> {
        let logits = self.spatial.forward(g, store, u)?;
        let mask = g.sigmoid(logits)?;
        Ok(g.mul_spatial(u, mask)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let (ut, uh) = self.branch_transforms(g, store, x)?;
        let sel = self.channel_select(g, store, ut, uh, mode)?;
        let u = g.add(ut, uh)?;
        let up = self.spatial_attend(g, store, u)?;
        let r = g.add(x, up)?;
        Ok(g.add(r, sel.v)?)
    }

    /// Set both branch kernels to the per-group identity (centre tap 1 on the
    /// matching channel) with zero bias.
    pub fn set_identity_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.cfg.channels;
        let per = c / self.cfg.groups;
        for conv in [&self.branch1, &self.branch2] {
            let w = store.get_mut(conv.weight);
            w.data_mut().fill(T::ZERO);
            for o in 0..c {
                w.data_mut()[((o * per + o % per) * 3 + 1) * 3 + 1] = T::ONE;
            }
            if let Some(b) = conv.bias {
                store.get_mut(b).data_mut().fill(T::ZERO);
            }
        }
    }

    /// Zero the spatial-attention convolution, making its mask exactly ½.
    pub fn zero_spatial<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.spatial.weight).data_mut().fill(T::ZERO);
        if let Some(b) = self.spatial.bias {
            store.get_mut(b).data_mut().fill(T::ZERO);
        }
    }
}
