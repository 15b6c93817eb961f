//! Pre-LN transformer encoder block and the TransScan composition
//! (SCAN followed by a transformer block on row-major flattened positions).

use serde::{Deserialize, Serialize};

use efcm_tensor::nn::{LayerNorm, Linear, Mode};
use efcm_tensor::{Graph, Init, NodeId, ParamStore, Scalar};

use crate::error::{config, CoreError, Result};
use crate::scan::{ScanBlock, ScanConfig};

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config(format!("dim {dim} not divisible by heads {heads}")));
        }
        let hidden = dim * mlp_ratio;
        Ok(Self {
            dim,
            heads,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            qkv: Linear::new(store, init, &format!("{prefix}.msa.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, init, &format!("{prefix}.msa.proj"), dim, dim, true),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            fc1: Linear::new(store, init, &format!("{prefix}.mlp.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{prefix}.mlp.fc2"), hidden, dim, true),
        })
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params()
            + self.qkv.num_params()
            + self.proj.num_params()
            + self.ln2.num_params()
            + self.fc1.num_params()
            + self.fc2.num_params()
    }

    /// Multi-head self-attention over `B×L×dim` tokens.
    pub fn msa<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: NodeId) -> Result<NodeId> {
        let qkv = self.qkv.forward(g, store, tokens)?;
        let att = g.attention(qkv, self.heads)?;
        self.proj.forward(g, store, att).map_err(CoreError::from)
    }

    pub fn forward_tokens<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.msa(g, store, h)?;
        let x2 = g.add(h, x)?;
        let h = self.ln2.forward(g, store, x2)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.add(h, x2)?)
    }

    /// `dim×H×W` maps in, same shape out.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.dim {
            return Err(CoreError::Shape(format!("transformer expects N×{}×H×W, got {shape:?}", self.dim)));
        }
        let t = g.nchw_to_tokens(x)?;
        let t = self.forward_tokens(g, store, t)?;
        Ok(g.tokens_to_nchw(t, shape[2], shape[3])?)
    }

    /// Zero the attention output projection and the second MLP layer, making
    /// the block an exact identity.
    pub fn zero_residual_branches<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for lin in [&self.proj, &self.fc2] {
            store.get_mut(lin.weight).data_mut().fill(T::ZERO);
            if let Some(b) = lin.bias {
                store.get_mut(b).data_mut().fill(T::ZERO);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransScanConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub scan: ScanConfig,
}

impl TransScanConfig {
    /// `heads = max(1, dim/64)`, MLP ratio 4, SCAN defaults.
    pub fn new(dim: usize, depth: usize) -> Self {
        Self {
            dim,
            depth,
            heads: (dim / 64).max(1),
            mlp_ratio: 4,
            scan: ScanConfig::new(dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config("depth must be ≥ 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(config("mlp ratio must be ≥ 1"));
        }
        if self.scan.channels != self.dim {
            return Err(config("SCAN channels must equal dim"));
        }
        self.scan.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TransScanBlock {
    pub scan: ScanBlock,
    pub transformer: TransformerBlock,
}

impl TransScanBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: &TransScanConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            scan: ScanBlock::new(store, init, &format!("{prefix}.scan"), cfg.scan)?,
            transformer: TransformerBlock::new(store, init, &format!("{prefix}.tr"), cfg.dim, cfg.heads, cfg.mlp_ratio)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.scan.num_params() + self.transformer.num_params()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, mode: Mode) -> Result<NodeId> {
        let x = self.scan.forward(g, store, x, mode)?;
        self.transformer.forward(g, store, x)
    }

    /// SCAN with identity branches and a zero spatial conv, transformer with
    /// zeroed residual branches: the block maps `X` to `3X`.
    pub fn make_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.scan.set_identity_branches(store);
        self.scan.zero_spatial(store);
        self.transformer.zero_residual_branches(store);
    }
}

#[derive(Debug, Clone)]
pub struct TransScanStack {
    pub cfg: TransScanConfig,
    pub blocks: Vec<TransScanBlock>,
}

impl TransScanStack {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cfg: TransScanConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| TransScanBlock::new(store, init, &format!("{prefix}.{i}"), &cfg))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, blocks })
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(TransScanBlock::num_params).sum()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: NodeId, mode: Mode) -> Result<NodeId> {
        for b in &self.blocks {
            x = b.forward(g, store, x, mode)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use efcm_tensor::Tensor;

    #[test]
    fn full_width_counts() {
        let mut store = ParamStore::<f32>::new();
        let cfg = TransScanConfig::new(384, 1);
        let b = TransScanBlock::new(&mut store, &mut Init::new(0), "b", &cfg).unwrap();
        assert_eq!(cfg.heads, 6);
        assert_eq!(b.transformer.num_params(), 1_774_464);
        assert_eq!(b.num_params(), 1_896_289);
        assert_eq!(store.num_params(), 1_896_289);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f64>::new();
        assert!(TransformerBlock::new(&mut store, &mut Init::new(0), "t", 10, 3, 4).is_err());
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let t = TransformerBlock::new(&mut store, &mut Init::new(3), "t", 8, 2, 4).unwrap();
        t.zero_residual_branches(&mut store);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_fn([1, 8, 2, 3], |i| (i as f64 * 0.7).sin()));
        let y = t.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
