//! Pieces shared by the training loops: batching, keep-best snapshots, early
//! stopping and the loss-curve CSV.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, Grads, Graph, ParamStore, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Dev evaluations per epoch (at least the one at epoch end).
    #[serde(default = "d_evals")]
    pub evals_per_epoch: usize,
}

fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    5e-4
}
fn d_batch() -> usize {
    16
}
fn d_wd() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    1.0
}
fn d_evals() -> usize {
    1
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: d_epochs(),
            lr: d_lr(),
            batch_size: d_batch(),
            seed: 0,
            weight_decay: d_wd(),
            grad_clip: d_clip(),
            evals_per_epoch: d_evals(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::validation("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::validation("grad_clip", "must be non-negative"));
        }
        if self.evals_per_epoch == 0 {
            return Err(Error::validation("evals_per_epoch", "must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }

    /// Seed for the dropout masks of optimizer step `step`.
    pub fn step_seed(&self, step: u64) -> u64 {
        rng::derive(self.seed, "dropout", step)
    }
}

/// Index batches for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(seed, "shuffle", epoch as u64));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Step indices (1-based within the epoch) after which dev evaluation runs.
pub fn eval_points(n_batches: usize, evals_per_epoch: usize) -> Vec<usize> {
    let k = evals_per_epoch.clamp(1, n_batches.max(1));
    let mut pts: Vec<usize> = (1..=k).map(|i| (i * n_batches).div_ceil(k)).collect();
    pts.dedup();
    pts
}

/// Backpropagates a scalar loss and returns its value with clipped
/// parameter gradients. The graph is consumed so the store can be updated.
pub fn loss_grads(mut g: Graph<'_>, loss: Var, cfg: &TrainRunConfig, step: u64) -> Result<(f64, Grads)> {
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {step}")));
    }
    g.backward(loss);
    let mut grads = g.param_grads();
    if cfg.grad_clip > 0.0 {
        grads.clip(cfg.grad_clip);
    }
    Ok((value, grads))
}

/// Tracks the best dev score and a snapshot of the parameters that achieved it.
#[derive(Debug, Clone)]
pub struct KeepBest {
    higher_is_better: bool,
    best: Option<f64>,
    best_step: u64,
    snapshot: Option<Vec<Tensor>>,
}

impl KeepBest {
    pub fn lower_is_better() -> Self {
        KeepBest { higher_is_better: false, best: None, best_step: 0, snapshot: None }
    }

    pub fn higher_is_better() -> Self {
        KeepBest { higher_is_better: true, best: None, best_step: 0, snapshot: None }
    }

    /// Records a score; snapshots `store` when it strictly improves.
    pub fn observe(&mut self, score: f64, step: u64, store: &ParamStore) -> bool {
        let better = match self.best {
            None => true,
            Some(b) if self.higher_is_better => score > b,
            Some(b) => score < b,
        };
        if better {
            self.best = Some(score);
            self.best_step = step;
            self.snapshot = Some(store.values().to_vec());
        }
        better
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_step(&self) -> u64 {
        self.best_step
    }

    /// Restores the snapshot into `store`.
    pub fn restore(self, store: &mut ParamStore) -> Result<()> {
        match self.snapshot {
            Some(v) => store.set_values(v),
            None => Ok(()),
        }
    }
}

/// Stops after `patience` consecutive evaluations without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, stale: 0 }
    }

    /// Feeds a higher-is-better metric; returns true once training should stop.
    pub fn update(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric <= b => self.stale += 1,
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn stale(&self) -> usize {
        self.stale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Mean training loss since the previous point; absent at initialization.
    pub train_loss: Option<f64>,
    pub dev: f64,
}

/// CSV with header `step,train_loss,<dev_column>`.
pub fn curve_csv(points: &[CurvePoint], dev_column: &str) -> String {
    let mut out = format!("step,train_loss,{dev_column}\n");
    for p in points {
        let tl = p.train_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.6}\n", p.step, tl, p.dev));
    }
    out
}
