//! Named parameter storage, seeded initialization and parameter hashing.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Owner of a model's parameters and non-trainable buffers (running stats).
///
/// Modules hold [`ParamId`]s into a store; the store is the only place
/// parameters are mutated.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// A clone is a distinct store with its own identity.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A pending running-statistics update recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub store: u64,
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.get(id).expect_same_shape("ParamStore::set", &value)?;
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over all parameters, frozen included.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// SHA-256 over names and little-endian bytes of every parameter whose name
    /// starts with `prefix` (empty prefix hashes the whole store).
    pub fn hash_prefix(&self, prefix: &str) -> String {
        self.hash_where(|name| name.starts_with(prefix))
    }

    /// SHA-256 over every parameter whose name satisfies `keep`.
    pub fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| keep(&p.name)) {
            h.update(p.name.as_bytes());
            bytes.clear();
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fold recorded batch statistics into running buffers:
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        let uid = self.uid;
        for u in updates.iter().filter(|u| u.store == uid) {
            for (buf, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let running = self.buffer_mut(buf);
                if running.len() != batch.len() {
                    return Err(TensorError::shape(
                        "apply_stat_updates",
                        format!("{}", running.len()),
                        format!("{}", batch.len()),
                    ));
                }
                for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                    *r = T::from_f64((1.0 - u.momentum) * r.to_f64() + u.momentum * b);
                }
            }
        }
        Ok(())
    }

    /// Every parameter and buffer by name, in insertion order.
    pub fn named_arrays(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .chain(self.buffers.iter().cloned())
            .collect()
    }

    /// Overwrite parameters and buffers from named arrays; every name in the
    /// store must be present with a matching shape.
    pub fn load_named(&mut self, arrays: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let src = arrays
                .get(&p.name)
                .ok_or_else(|| TensorError::Container(format!("missing array {}", p.name)))?;
            p.value.expect_same_shape("load_named", src)?;
            p.value = Arc::new(src.clone());
        }
        for (name, buf) in &mut self.buffers {
            let src = arrays
                .get(name)
                .ok_or_else(|| TensorError::Container(format!("missing array {name}")))?;
            buf.expect_same_shape("load_named", src)?;
            *buf = src.clone();
        }
        Ok(())
    }

    /// Same parameters at another precision (fresh store identity).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Seeded weight initializer. Weights and biases of convolutions and linear
/// maps are drawn from `U(−1/√fan_in, 1/√fan_in)`; norm affines start at
/// ones/zeros.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| {
            T::from_f64(rng.random_range(-bound..=bound))
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Deterministic 64-bit mix of a run seed and a stream key (SplitMix64).
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_only_for_touched_prefix() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("head.w", Tensor::ones([3]), true);
        s.add("student.w", Tensor::ones([2]), true);
        let before_student = s.hash_prefix("student.");
        let before_head = s.hash_prefix("head.");
        s.get_mut(a).data_mut()[0] = 2.0;
        assert_eq!(before_student, s.hash_prefix("student."));
        assert_ne!(before_head, s.hash_prefix("head."));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Tensor<f32> = Init::new(7).fan_in(&[4, 4], 16);
        let b: Tensor<f32> = Init::new(7).fan_in(&[4, 4], 16);
        let c: Tensor<f32> = Init::new(8).fan_in(&[4, 4], 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let m = s.add_buffer("bn.running_mean", Tensor::zeros([1]));
        let v = s.add_buffer("bn.running_var", Tensor::ones([1]));
        s.apply_stat_updates(&[StatUpdate {
            store: s.uid(),
            mean: m,
            var: v,
            batch_mean: vec![2.0],
            batch_var: vec![3.0],
            momentum: 0.1,
        }])
        .unwrap();
        assert!((s.buffer(m).data()[0] - 0.2).abs() < 1e-15);
        assert!((s.buffer(v).data()[0] - 1.2).abs() < 1e-15);
    }
}
