use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters plus AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter, rounded to f32 storage precision. Names must be
    /// unique; reuse is a programming error.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        round_f32(value.data_mut());
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.first_moment.push(Tensor::zeros(value.rows(), value.cols()));
        self.second_moment.push(Tensor::zeros(value.rows(), value.cols()));
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(rows, cols, data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::full(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for (name, v) in self.names.iter().zip(&self.values) {
            name.bytes().for_each(&mut eat);
            for d in v.shape() {
                (d as u64).to_le_bytes().into_iter().for_each(&mut eat);
            }
            for x in v.data() {
                x.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Copies values (not optimizer state) from `other` where names match.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix_map: impl Fn(&str) -> Option<String>) -> usize {
        let mut n = 0;
        for (name, v) in other.names.iter().zip(&other.values) {
            if let Some(target) = prefix_map(name) {
                if let Some(id) = self.id(&target) {
                    if self.values[id.0].shape() == v.shape() {
                        self.values[id.0] = v.clone();
                        n += 1;
                    }
                }
            }
        }
        n
    }

    /// Replaces every value in place, keeping names and optimizer state.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::DimMismatch { expected: self.values.len(), got: values.len() });
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::invalid(format!("shape mismatch for {}", self.names[i])));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// One decoupled-weight-decay Adam update. A non-finite gradient aborts
    /// the step before anything is modified.
    pub fn adamw_step(&mut self, grads: &Grads, cfg: &AdamW) -> Result<()> {
        if grads.slots.len() > self.values.len() {
            return Err(Error::DimMismatch { expected: self.values.len(), got: grads.slots.len() });
        }
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.values[i].shape() {
                    return Err(Error::invalid(format!("gradient shape mismatch for {}", self.names[i])));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", self.names[i])));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = grads.slots.get(i).and_then(Option::as_ref);
            let p = self.values[i].data_mut();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                p[j] *= 1.0 - cfg.lr * cfg.weight_decay;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            round_f32(p);
        }
        Ok(())
    }
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW { lr, ..Default::default() }
    }
}

/// Per-parameter gradients, indexed like the owning `ParamStore`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new() -> Self {
        Grads { slots: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.slots.iter_mut().flatten().for_each(|t| t.scale_assign(c));
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if max_norm > 0.0 && n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}
