//! AdamW with decoupled weight decay, two learning-rate groups and global
//! gradient-norm clipping. The moment estimates are plain tensors so they
//! can be checkpointed and restored exactly.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::model::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Transformer, projection, query and head parameters.
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Both learning rates are multiplied by `lr_drop_factor` from this
    /// step on.
    pub lr_drop_step: Option<u64>,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
            lr_drop_step: None,
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("lr_backbone", self.lr_backbone)] {
            // zero is allowed for frozen-weight experiments
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MgtrError::Config(format!("{name} = {v} must be a nonnegative number")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MgtrError::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(self.lr_drop_factor >= 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(MgtrError::Config("lr_drop_factor must be a nonnegative number".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(MgtrError::Config("eps must be positive; weight_decay and clip_norm nonnegative".into()));
        }
        Ok(())
    }

    /// Learning rate of `group` for the update made after `steps_done`
    /// earlier updates.
    pub fn lr_for(&self, group: ParamGroup, steps_done: u64) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Transformer => self.lr,
            ParamGroup::Frozen => 0.0,
        };
        match self.lr_drop_step {
            Some(at) if steps_done >= at => base * self.lr_drop_factor,
            _ => base,
        }
    }
}

pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Scale applied to every gradient so the global norm is at most `max_norm`.
pub fn clip_scale(grads: &BTreeMap<String, Tensor>, max_norm: f64) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    let scale = if max_norm > 0.0 && norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    };
    Ok((norm, scale))
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips, then applies one update to every trainable parameter. Returns
    /// the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let (norm, scale) = clip_scale(grads, self.cfg.clip_norm)?;
        let steps_done = self.step;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, p) in params.trainable() {
            let Some(g) = grads.get(name) else { continue };
            // detached so the moments don't chain autograd history across steps
            let g = (g.detach() * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            }
            .detach();
            let v = match self.v.get(name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            }
            .detach();
            let lr = self.cfg.lr_for(p.group, steps_done);
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + self.cfg.eps)?)?;
            let current = p.var.as_tensor().detach();
            let next = ((current * (1.0 - lr * self.cfg.weight_decay))? - (update * lr)?)?;
            p.var.set(&next.detach())?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Moment tensors keyed `adam_m/<param>` and `adam_v/<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam_m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam_v/{k}"), t.clone());
        }
        out
    }

    pub fn restore(cfg: OptimConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut opt = AdamW::new(cfg);
        opt.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam_m/") {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam_v/") {
                opt.v.insert(name.to_string(), t.clone());
            }
        }
        opt
    }
}
