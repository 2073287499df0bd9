use std::collections::BTreeMap;

use rand::Rng;

use super::graph::BnUpdate;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Both maps are ordered by name, which fixes iteration order
/// for initialization, flattening and serialization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// `uniform(−1/√fan_in, 1/√fan_in)`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32 as f64).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape checked by caller"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape, v));
    }

    /// Registers gamma = 1, beta = 0 and running stats (mean 0, var 1) under `name`.
    pub fn init_batch_norm(&mut self, name: &str, channels: usize) {
        self.init_const(&format!("{name}.gamma"), &[channels], 1.0);
        self.init_const(&format!("{name}.beta"), &[channels], 0.0);
        self.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.name);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::Graph(format!("missing buffer {key}")))?;
                for (r, b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = ((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b) as f32 as f64;
                }
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.params.values_mut().for_each(Tensor::round_to_f32);
        self.buffers.values_mut().for_each(Tensor::round_to_f32);
    }

    /// Copies every parameter and buffer whose name starts with `prefix` from
    /// `other`. Returns the number of tensors copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (src, dst) in [(&other.params, &mut self.params), (&other.buffers, &mut self.buffers)] {
            for (name, t) in src.range(prefix.to_string()..) {
                if !name.starts_with(prefix) {
                    break;
                }
                let slot = dst
                    .get_mut(name)
                    .ok_or_else(|| Error::Mismatch(format!("target model has no tensor {name}")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Mismatch(format!(
                        "{name}: shape {:?} vs {:?}",
                        slot.shape(),
                        t.shape()
                    )));
                }
                *slot = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
