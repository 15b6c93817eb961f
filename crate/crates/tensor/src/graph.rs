//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Node values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every input and parameter leaf that requires one.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{attention, conv, norm, pool};
use crate::params::{BufferId, ParamId, ParamStore, StatUpdate};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{shape_str, Tensor};

pub use conv::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Ctx<'a, T> {
    inputs: Vec<&'a Tensor<T>>,
    output: &'a Tensor<T>,
    grad: &'a Tensor<T>,
    needs: Vec<bool>,
}

type Backward<T> = Box<dyn Fn(&Ctx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<NodeId>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    stat_updates: Vec<StatUpdate>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, ParamId), Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&(store.uid(), id))
    }

    /// Parameter ids of `store` that received a gradient.
    pub fn params_of(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .params
            .keys()
            .filter(|(uid, _)| *uid == store.uid())
            .map(|&(_, id)| id)
            .collect();
        ids.sort();
        ids
    }

    /// Sum another gradient set into this one (parameter gradients only).
    pub fn accumulate(&mut self, other: Gradients<T>) -> Result<()> {
        for (k, g) in other.params {
            match self.params.get_mut(&k) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.params.insert(k, g);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }
}

fn one<T: Scalar>(t: Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    Ok(vec![Some(t)])
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            stat_updates: Vec::new(),
        }
    }

    /// A graph that only evaluates (no backward closures are kept).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<(u64, ParamId)>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::node`].
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(Arc::new(t), true, None)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(Arc::new(t), false, None)
    }

    /// Leaf bound to a stored parameter; frozen parameters never require grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let trainable = store.is_trainable(id);
        self.leaf(store.get_arc(id), trainable, Some((store.uid(), id)))
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[NodeId],
        backward: impl Fn(&Ctx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<NodeId> {
        value.ensure_finite(op)?;
        let requires = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            backward: if requires {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad: requires,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, &[a, b], |c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, &[a, b], |c| {
            Ok(vec![Some(c.grad.clone()), Some(c.grad.scale(-T::ONE))])
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, &[a, b], |c| {
            let ga = if c.needs[0] { Some(c.grad.zip_map(c.inputs[1], |g, y| g * y)?) } else { None };
            let gb = if c.needs[1] { Some(c.grad.zip_map(c.inputs[0], |g, x| g * x)?) } else { None };
            Ok(vec![ga, gb])
        })
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let s = T::from_f64(s);
        let v = self.value(a).scale(s);
        self.push("scale", v, &[a], move |c| one(c.grad.scale(s)))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let s = T::from_f64(s);
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, &[a], |c| one(c.grad.clone()))
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| T::ONE - x);
        self.push("one_minus", v, &[a], |c| one(c.grad.scale(-T::ONE)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push("relu", v, &[a], |c| {
            one(c.grad.zip_map(c.inputs[0], |g, x| if x > T::ZERO { g } else { T::ZERO })?)
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, &[a], |c| {
            one(c.grad.zip_map(c.output, |g, y| g * y * (T::ONE - y))?)
        })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.tanh());
        self.push("tanh", v, &[a], |c| {
            one(c.grad.zip_map(c.output, |g, y| g * (T::ONE - y * y))?)
        })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        self.push("gelu", v, &[a], |c| {
            one(c.grad.zip_map(c.inputs[0], |g, x| g * gelu_grad(x))?)
        })
    }

    // ---- broadcasting ------------------------------------------------------

    /// `x[n,c,·,·] · s[n,c]`
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.value(x), self.value(s));
        xv.expect_ndim("mul_channel", 4)?;
        let (n, ch) = (xv.dim(0), xv.dim(1));
        if sv.shape() != [n, ch] {
            return Err(TensorError::shape("mul_channel", format!("[{n}, {ch}]"), shape_str(sv.shape())));
        }
        let hw = xv.dim(2) * xv.dim(3);
        let mut out = xv.clone();
        for (plane, &sc) in out.data_mut().chunks_mut(hw.max(1)).zip(sv.data()) {
            for v in plane {
                *v *= sc;
            }
        }
        self.push("mul_channel", out, &[x, s], move |c| {
            let (xv, sv) = (c.inputs[0], c.inputs[1]);
            let gx = if c.needs[0] {
                let mut g = c.grad.clone();
                for (plane, &sc) in g.data_mut().chunks_mut(hw.max(1)).zip(sv.data()) {
                    for v in plane {
                        *v *= sc;
                    }
                }
                Some(g)
            } else {
                None
            };
            let gs = if c.needs[1] {
                let data = c
                    .grad
                    .data()
                    .chunks(hw.max(1))
                    .zip(xv.data().chunks(hw.max(1)))
                    .map(|(g, x)| g.iter().zip(x).map(|(&a, &b)| a * b).sum())
                    .collect();
                Some(Tensor::from_vec(sv.shape().to_vec(), data)?)
            } else {
                None
            };
            Ok(vec![gx, gs])
        })
    }

    /// `x[n,c,i,j] · m[n,0,i,j]`
    pub fn mul_spatial(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (xv, mv) = (self.value(x), self.value(m));
        xv.expect_ndim("mul_spatial", 4)?;
        let (n, ch, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if mv.shape() != [n, 1, h, w] {
            return Err(TensorError::shape("mul_spatial", format!("[{n}, 1, {h}, {w}]"), shape_str(mv.shape())));
        }
        let hw = h * w;
        let mut out = xv.clone();
        for b in 0..n {
            let mask = &mv.data()[b * hw..][..hw];
            for plane in out.data_mut()[b * ch * hw..][..ch * hw].chunks_mut(hw) {
                for (v, &mm) in plane.iter_mut().zip(mask) {
                    *v *= mm;
                }
            }
        }
        self.push("mul_spatial", out, &[x, m], move |c| {
            let (xv, mv) = (c.inputs[0], c.inputs[1]);
            let gx = if c.needs[0] {
                let mut g = c.grad.clone();
                for b in 0..n {
                    let mask = &mv.data()[b * hw..][..hw];
                    for plane in g.data_mut()[b * ch * hw..][..ch * hw].chunks_mut(hw) {
                        for (v, &mm) in plane.iter_mut().zip(mask) {
                            *v *= mm;
                        }
                    }
                }
                Some(g)
            } else {
                None
            };
            let gm = if c.needs[1] {
                let mut g = Tensor::zeros(mv.shape().to_vec());
                for b in 0..n {
                    for cc in 0..ch {
                        let off = (b * ch + cc) * hw;
                        for i in 0..hw {
                            g.data_mut()[b * hw + i] += c.grad.data()[off + i] * xv.data()[off + i];
                        }
                    }
                }
                Some(g)
            } else {
                None
            };
            Ok(vec![gx, gm])
        })
    }

    // ---- convolution & pooling ----------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.push("conv2d", out, &parents, move |c| {
            let need = [c.needs[0], c.needs[1], has_bias && c.needs[2]];
            let g = conv::conv2d_backward(c.inputs[0], c.inputs[1], has_bias, geom, c.grad, need)?;
            let mut v = vec![g.input, g.weight];
            if has_bias {
                v.push(g.bias);
            }
            Ok(v)
        })
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let (out, arg) = pool::max_pool_forward(self.value(x), kernel, stride, padding)?;
        self.push("max_pool2d", out, &[x], move |c| {
            one(pool::max_pool_backward(c.inputs[0].shape(), &arg, c.grad)?)
        })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = pool::global_avg_pool_forward(self.value(x))?;
        self.push("global_avg_pool", out, &[x], |c| {
            one(pool::global_avg_pool_backward(c.inputs[0].shape(), c.grad)?)
        })
    }

    // ---- normalization -----------------------------------------------------

    /// Batch norm with statistics of the current batch. The batch mean and
    /// unbiased variance are recorded as a pending running-stat update.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: Option<(u64, BufferId, BufferId, f64)>,
    ) -> Result<NodeId> {
        let (mean, var, m) = norm::batch_stats(self.value(x))?;
        let (out, cache) = norm::batch_norm_apply(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps)?;
        if let Some((store, mean_id, var_id, momentum)) = running {
            let unbiased = if m > 1 {
                var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
            } else {
                var.clone()
            };
            self.stat_updates.push(StatUpdate {
                store,
                mean: mean_id,
                var: var_id,
                batch_mean: mean,
                batch_var: unbiased,
                momentum,
            });
        }
        self.push("batch_norm", out, &[x, gamma, beta], move |c| {
            let g = norm::batch_norm_backward(&cache, c.inputs[1], c.grad, true)?;
            Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
        })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<NodeId> {
        let mean: Vec<f64> = mean.data().iter().map(|v| v.to_f64()).collect();
        let var: Vec<f64> = var.data().iter().map(|v| v.to_f64()).collect();
        let (out, cache) = norm::batch_norm_apply(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps)?;
        self.push("batch_norm", out, &[x, gamma, beta], move |c| {
            let g = norm::batch_norm_backward(&cache, c.inputs[1], c.grad, false)?;
            Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
        })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (out, cache) = norm::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push("layer_norm", out, &[x, gamma, beta], move |c| {
            let g = norm::layer_norm_backward(&cache, c.inputs[1], c.grad)?;
            Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
        })
    }

    // ---- dense algebra -----------------------------------------------------

    /// `y = x·Wᵀ + b` over the last axis of `x`; `w` is `out×in`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        wv.expect_ndim("linear", 2)?;
        let (out_f, in_f) = (wv.dim(0), wv.dim(1));
        if xv.shape().last() != Some(&in_f) {
            return Err(TensorError::shape("linear", format!("[.., {in_f}]"), shape_str(xv.shape())));
        }
        let rows = xv.len() / in_f;
        let mut y = vec![T::ZERO; rows * out_f];
        gemm(rows, in_f, out_f, xv.data(), false, wv.data(), true, &mut y, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out_f] {
                return Err(TensorError::shape("linear", format!("bias [{out_f}]"), shape_str(bv.shape())));
            }
            for row in y.chunks_mut(out_f) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty") = out_f;
        let out = Tensor::from_vec(shape, y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", out, &parents, move |c| {
            let (xv, wv, g) = (c.inputs[0], c.inputs[1], c.grad);
            let gx = if c.needs[0] {
                let mut d = vec![T::ZERO; rows * in_f];
                gemm(rows, out_f, in_f, g.data(), false, wv.data(), false, &mut d, false);
                Some(Tensor::from_vec(xv.shape().to_vec(), d)?)
            } else {
                None
            };
            let gw = if c.needs[1] {
                let mut d = vec![T::ZERO; out_f * in_f];
                gemm(out_f, rows, in_f, g.data(), true, xv.data(), false, &mut d, false);
                Some(Tensor::from_vec([out_f, in_f], d)?)
            } else {
                None
            };
            let mut v = vec![gx, gw];
            if c.inputs.len() == 3 {
                let mut d = vec![T::ZERO; out_f];
                for row in g.data().chunks(out_f) {
                    for (a, &r) in d.iter_mut().zip(row) {
                        *a += r;
                    }
                }
                v.push(Some(Tensor::from_vec([out_f], d)?));
            }
            Ok(v)
        })
    }

    /// 2-D matrix product `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_ndim("matmul", 2)?;
        bv.expect_ndim("matmul", 2)?;
        let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
        if bv.dim(0) != k {
            return Err(TensorError::shape("matmul", format!("[{k}, _]"), shape_str(bv.shape())));
        }
        let mut y = vec![T::ZERO; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut y, false);
        let out = Tensor::from_vec([m, n], y)?;
        self.push("matmul", out, &[a, b], move |c| {
            let ga = if c.needs[0] {
                let mut d = vec![T::ZERO; m * k];
                gemm(m, n, k, c.grad.data(), false, c.inputs[1].data(), true, &mut d, false);
                Some(Tensor::from_vec([m, k], d)?)
            } else {
                None
            };
            let gb = if c.needs[1] {
                let mut d = vec![T::ZERO; k * n];
                gemm(k, m, n, c.inputs[0].data(), true, c.grad.data(), false, &mut d, false);
                Some(Tensor::from_vec([k, n], d)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, &[x], |c| {
            one(c.grad.clone().reshape(c.inputs[0].shape().to_vec())?)
        })
    }

    /// `N×C×H×W → N×(H·W)×C`, positions flattened row-major.
    pub fn nchw_to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_ndim("nchw_to_tokens", 4)?;
        let (n, c, hw) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
        let out = Tensor::from_vec([n, hw, c], transpose_inner(xv.data(), n, c, hw))?;
        self.push("nchw_to_tokens", out, &[x], move |ctx| {
            let g = transpose_inner(ctx.grad.data(), n, hw, c);
            one(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), g)?)
        })
    }

    /// `N×(H·W)×C → N×C×H×W`.
    pub fn tokens_to_nchw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_ndim("tokens_to_nchw", 3)?;
        let (n, l, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if l != h * w {
            return Err(TensorError::shape("tokens_to_nchw", format!("{} tokens", h * w), shape_str(xv.shape())));
        }
        let out = Tensor::from_vec([n, c, h, w], transpose_inner(xv.data(), n, l, c))?;
        self.push("tokens_to_nchw", out, &[x], move |ctx| {
            let g = transpose_inner(ctx.grad.data(), n, c, l);
            one(Tensor::from_vec(ctx.inputs[0].shape().to_vec(), g)?)
        })
    }

    /// Multi-head scaled dot-product attention over packed `B×L×3C`
    /// projections. Returns the attended `B×L×C` values; the per-head
    /// attention matrices are available through [`Graph::attention_probs`].
    pub fn attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let (out, probs) = attention::attention_forward(self.value(qkv), heads)?;
        let saved = probs.clone();
        let id = self.push("attention", out, &[qkv], move |c| {
            one(attention::attention_backward(c.inputs[0], &saved, heads, c.grad)?)
        })?;
        self.nodes.push(Node {
            value: Arc::new(probs),
            parents: vec![id],
            backward: None,
            requires_grad: false,
            param: None,
        });
        Ok(id)
    }

    /// Attention matrices `B×heads×L×L` produced by the attention node `id`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&Tensor<T>> {
        let next = self.nodes.get(id.0 + 1)?;
        (next.parents == [id] && next.backward.is_none() && !next.requires_grad && next.param.is_none())
            .then(|| &*next.value)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push("softmax", out, &[x], move |c| {
            let mut g = c.grad.clone();
            for (grow, prow) in g.data_mut().chunks_mut(d).zip(c.output.data().chunks(d)) {
                let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (gv, &p) in grow.iter_mut().zip(prow) {
                    *gv = p * (*gv - dot);
                }
            }
            one(g)
        })
    }

    // ---- reductions & losses -------------------------------------------------

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, &[x], |c| {
            one(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item()))
        })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let inv = T::from_f64(1.0 / n as f64);
        let out = Tensor::scalar(self.value(x).sum() * inv);
        self.push("mean", out, &[x], move |c| {
            one(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item() * inv))
        })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape("mse", bv)?;
        if av.is_empty() {
            return Err(TensorError::invalid("mse", "empty tensor"));
        }
        let n = T::from_f64(av.len() as f64);
        let out = Tensor::scalar(av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n);
        self.push("mse", out, &[a, b], move |c| {
            let k = c.grad.item() * T::from_f64(2.0) / n;
            let diff = c.inputs[0].sub(c.inputs[1])?;
            Ok(vec![Some(diff.scale(k)), Some(diff.scale(-k))])
        })
    }

    /// Row-wise `KL(softmax(t/τ) ‖ softmax(s/τ))` with natural log, averaged
    /// over rows. Rows are the last axis.
    pub fn kl_softmax(&mut self, t: NodeId, s: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(TensorError::invalid("kl_softmax", format!("temperature must be > 0, got {tau}")));
        }
        let (tv, sv) = (self.value(t), self.value(s));
        tv.expect_same_shape("kl_softmax", sv)?;
        let d = *tv.shape().last().ok_or_else(|| TensorError::invalid("kl_softmax", "scalar input"))?;
        let rows = tv.len() / d.max(1);
        if rows == 0 || d == 0 {
            return Err(TensorError::invalid("kl_softmax", "empty tensor"));
        }
        let inv_tau = T::from_f64(1.0 / tau);
        let (lp, lq) = (log_softmax_rows(tv, d, inv_tau), log_softmax_rows(sv, d, inv_tau));
        let mut row_kl = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = T::ZERO;
            for j in 0..d {
                let (a, b) = (lp[r * d + j], lq[r * d + j]);
                acc += a.exp() * (a - b);
            }
            row_kl.push(acc);
        }
        let inv_rows = T::from_f64(1.0 / rows as f64);
        let out = Tensor::scalar(row_kl.iter().copied().sum::<T>() * inv_rows);
        self.push("kl_softmax", out, &[t, s], move |c| {
            let k = c.grad.item() * inv_rows * inv_tau;
            let shape = c.inputs[0].shape().to_vec();
            let gt = if c.needs[0] {
                let mut g = vec![T::ZERO; rows * d];
                for r in 0..rows {
                    for j in 0..d {
                        let i = r * d + j;
                        g[i] = k * lp[i].exp() * (lp[i] - lq[i] - row_kl[r]);
                    }
                }
                Some(Tensor::from_vec(shape.clone(), g)?)
            } else {
                None
            };
            let gs = if c.needs[1] {
                let g = (0..rows * d).map(|i| k * (lq[i].exp() - lp[i].exp())).collect();
                Some(Tensor::from_vec(shape, g)?)
            } else {
                None
            };
            Ok(vec![gt, gs])
        })
    }

    /// Cross-entropy of `logits` (`N×K`) against soft target rows (`N×K`),
    /// averaged over rows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &Tensor<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        lv.expect_ndim("cross_entropy", 2)?;
        lv.expect_same_shape("cross_entropy", targets)?;
        let (rows, k) = (lv.dim(0), lv.dim(1));
        if rows == 0 {
            return Err(TensorError::invalid("cross_entropy", "empty batch"));
        }
        let lsm = log_softmax_rows(lv, k, T::ONE);
        let inv_rows = T::from_f64(1.0 / rows as f64);
        let loss = -lsm.iter().zip(targets.data()).map(|(&l, &y)| l * y).sum::<T>() * inv_rows;
        let targets = targets.clone();
        self.push("cross_entropy", Tensor::scalar(loss), &[logits], move |c| {
            let s = c.grad.item() * inv_rows;
            let g = lsm
                .iter()
                .zip(targets.data())
                .map(|(&l, &y)| s * (l.exp() - y))
                .collect();
            one(Tensor::from_vec([rows, k], g)?)
        })
    }

    // ---- backward ------------------------------------------------------------

    /// Gradients of the one-element node `loss` with respect to every input
    /// and trainable parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(TensorError::invalid("backward", "graph built without gradient tracking"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::shape("backward", "one-element loss", shape_str(lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = Ctx {
                inputs: node.parents.iter().map(|p| &*self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                pg.ensure_finite("backward")?;
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params: HashMap<(u64, ParamId), Tensor<T>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(key), Some(g)) = (node.param, grads[i].as_ref()) {
                match params.get_mut(&key) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        params.insert(key, g.clone());
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// `(n, a, b) → (n, b, a)` transpose of the two inner axes.
fn transpose_inner<T: Scalar>(src: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for bi in 0..n {
        let s = &src[bi * a * b..][..a * b];
        let d = &mut out[bi * a * b..][..a * b];
        for i in 0..a {
            for j in 0..b {
                d[j * a + i] = s[i * b + j];
            }
        }
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], Scalar::max);
    let mut z = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn log_softmax_rows<T: Scalar>(x: &Tensor<T>, d: usize, scale: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mx = row.iter().map(|&v| v * scale).fold(row[0] * scale, Scalar::max);
        let lse = row.iter().map(|&v| (v * scale - mx).exp()).sum::<T>().ln() + mx;
        out.extend(row.iter().map(|&v| v * scale - lse));
    }
    out
}
