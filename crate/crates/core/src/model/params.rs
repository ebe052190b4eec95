//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Transformer,
    /// Not updated by the optimizer (frozen batch-norm statistics and affines).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// All model parameters, keyed by name in a stable (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        ParamStore {
            device,
            dtype,
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(MgtrError::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.entries.insert(name.to_string(), Param { var, group });
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter().filter(|(_, p)| p.group != ParamGroup::Frozen)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.var.elem_count()).sum()
    }

    /// Overwrites a parameter in place; the model sees the new value at once.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| MgtrError::Config(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(MgtrError::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Copies all values out, for snapshots and checkpoints.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }
}

/// Seeded initializer that registers new parameters in a [`ParamStore`].
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, group: ParamGroup) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.insert(name, data, shape, group)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| MgtrError::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, data, shape, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.store.insert(name, vec![value; n], shape, group)
    }

    pub fn xavier(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        let receptive: usize = shape[2..].iter().product();
        let fan_out = shape[0] * receptive;
        let fan_in = shape[1] * receptive;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound, group)
    }

    /// Default fan-in scaled uniform init for linear and conv weights.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt(), group)
    }

    /// He-normal init for convolutions followed by ReLU.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        let fan_out: usize = shape[0] * shape[2..].iter().product::<usize>();
        self.normal(name, shape, (2.0 / fan_out as f64).sqrt(), group)
    }
}
