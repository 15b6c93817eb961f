//! Parameterized layers. Each layer registers its parameters in a
//! [`ParamStore`] at construction and keeps only ids.

use crate::error::Result;
use crate::graph::{ConvGeometry, Graph, NodeId};
use crate::params::{BufferId, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[out_features, in_features], in_features),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.fan_in(&[out_features], in_features), true));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        geometry.validate(in_channels, out_channels)?;
        let fan_in = in_channels / geometry.groups * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[out_channels, in_channels / geometry.groups, kernel, kernel], fan_in),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.fan_in(&[out_channels], fan_in), true));
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            geometry,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geometry)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * (self.in_channels / self.geometry.groups) * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones([channels]), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros([channels]), true),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => g.batch_norm_train(
                x,
                gamma,
                beta,
                self.eps,
                Some((store.uid(), self.running_mean, self.running_var, self.momentum)),
            ),
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.buffer(self.running_mean),
                store.buffer(self.running_var),
                self.eps,
            ),
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones([dim]), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros([dim]), true),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts_match_store() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        let fc = Linear::new(&mut store, &mut init, "fc", 384, 1024, true);
        assert_eq!(fc.num_params(), 394_240);
        let proj = Conv2d::new(&mut store, &mut init, "proj", 256, 384, 4, ConvGeometry::new(4, 0, 1, 1), true).unwrap();
        assert_eq!(proj.num_params(), 1_573_248);
        let grouped = Conv2d::new(&mut store, &mut init, "g", 384, 384, 3, ConvGeometry::new(1, 1, 1, 32), true).unwrap();
        assert_eq!(grouped.num_params(), 41_856);
        assert_eq!(store.num_params(), 394_240 + 1_573_248 + 41_856);
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_vec([1, 2], vec![3.0, -1.0]).unwrap());
        let y = bn.forward(&mut g, &store, x, Mode::Eval).unwrap();
        let expect = [3.0 / (1.0f64 + 1e-5).sqrt(), -1.0 / (1.0f64 + 1e-5).sqrt()];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_batch_norm_records_running_update() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec([2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut g, &store, x, Mode::Train).unwrap();
        let updates = g.take_stat_updates();
        store.apply_stat_updates(&updates).unwrap();
        assert!((store.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((store.buffer(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
    }
}
