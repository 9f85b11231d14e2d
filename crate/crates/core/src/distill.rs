//! Student speech encoder trained to match a frozen sequence-embedding teacher,
//! with a FIFO bank of past teacher embeddings as extra negatives.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, ScoredPairSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{
    loss, tensor_from_f32, AttentionPool, Checkpoint, Encoder, EncoderConfig, Graph, Linear, Mode, ParamId, ParamStore,
    Tensor, Var,
};
use crate::rng;
use crate::teachers::Teacher;
use crate::training::{self, CurvePoint, KeepBest, TrainRunConfig};
use crate::wavembed::Example;

pub const STUDENT_KIND: &str = "student";

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queue: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::validation("bank_capacity", "capacity and dimension must be positive"));
        }
        Ok(MemoryBank { capacity, dim, queue: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.queue.iter()
    }

    /// Appends unit-normalized copies in order, evicting the oldest beyond capacity.
    /// The whole batch is checked before anything is enqueued.
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        let mut normed = Vec::with_capacity(batch.len());
        for v in batch {
            if v.len() != self.dim {
                return Err(Error::DimMismatch { expected: self.dim, got: v.len() });
            }
            let n = loss::norm(v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid("bank entry has zero or non-finite norm"));
            }
            normed.push(v.iter().map(|x| x / n).collect::<Vec<f64>>());
        }
        for v in normed {
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentPooling {
    #[default]
    SelfAttention,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub feature_dim: usize,
    pub teacher_dim: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pooling: StudentPooling,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Pool {
    Attention(AttentionPool),
    Cls(ParamId),
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub store: ParamStore,
    encoder: Encoder,
    pool: Pool,
    projection: Linear,
}

impl StudentModel {
    pub fn new(config: StudentConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.teacher_dim == 0 {
            return Err(Error::validation("feature_dim", "feature and teacher dimensions must be positive"));
        }
        let mut store = ParamStore::new();
        let mut r = rng::rng(config.init_seed, "student-init", 0);
        let d = config.encoder.model_dim;
        let encoder = Encoder::new(&mut store, "student.encoder", config.encoder, Some(config.feature_dim), &mut r)?;
        let pool = match config.pooling {
            StudentPooling::SelfAttention => Pool::Attention(AttentionPool::new(&mut store, "student.pool", d, &mut r)),
            StudentPooling::Cls => Pool::Cls(store.add_normal("student.cls", 1, d, 1.0, &mut r)),
        };
        let projection = Linear::new(&mut store, "student.proj", d, config.teacher_dim, &mut r);
        Ok(StudentModel { config, store, encoder, pool, projection })
    }

    pub fn dim(&self) -> usize {
        self.config.teacher_dim
    }

    pub fn embed_graph(&self, g: &mut Graph, fs: &FeatureSequence) -> Result<Var> {
        if fs.dim() != self.config.feature_dim {
            return Err(Error::DimMismatch { expected: self.config.feature_dim, got: fs.dim() });
        }
        let x = g.input(tensor_from_f32(fs.n_frames(), fs.dim(), fs.data()));
        let pooled = match self.pool {
            Pool::Attention(p) => {
                let h = self.encoder.forward(g, x)?;
                p.forward(g, h)?
            }
            Pool::Cls(cls) => {
                let lin = self.encoder.input.expect("student encoder projects its input");
                let h = lin.forward(g, x);
                let c = g.param(cls);
                let h = g.concat_rows(&[c, h]);
                let out = self.encoder.forward_embedded(g, h)?;
                g.slice_rows(out, 0, 1)
            }
        };
        Ok(self.projection.forward(g, pooled))
    }

    /// Eval-mode pooled and projected embedding.
    pub fn embed(&self, fs: &FeatureSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = self.embed_graph(&mut g, fs)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(STUDENT_KIND, serde_json::to_value(&self.config).expect("serializes"), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(STUDENT_KIND)?;
        let config: StudentConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = StudentModel::new(config)?;
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    #[default]
    Infonce,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub loss: DistillLoss,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_bank")]
    pub bank_capacity: usize,
    #[serde(default = "d_run")]
    pub run: TrainRunConfig,
}

fn d_tau() -> f64 {
    0.05
}
fn d_bank() -> usize {
    256
}
fn d_run() -> TrainRunConfig {
    TrainRunConfig { lr: 1e-4, batch_size: 32, ..Default::default() }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { loss: DistillLoss::default(), tau: d_tau(), bank_capacity: d_bank(), run: d_run() }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::validation("tau", "must be positive"));
        }
        if self.bank_capacity == 0 {
            return Err(Error::validation("bank_capacity", "must be positive"));
        }
        self.run.validate()
    }
}

fn teacher_rows(teacher: &Teacher, batch: &[Example]) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .map(|ex| teacher.embed(ex.target).map_err(|e| Error::invalid(format!("teacher target for {}: {e}", ex.id))))
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::new(rows.len(), d, rows.iter().flatten().copied().collect()).expect("rows share a width")
}

/// Distillation loss for one batch inside `g`. Keys for InfoNCE are the batch's
/// teacher embeddings followed by the bank, so every anchor sees `B - 1 + |bank|`
/// negatives.
pub fn distill_loss_graph(
    g: &mut Graph,
    student: &StudentModel,
    batch: &[Example],
    teacher_emb: &[Vec<f64>],
    bank: &MemoryBank,
    cfg: &DistillConfig,
) -> Result<Var> {
    if batch.is_empty() || batch.len() != teacher_emb.len() {
        return Err(Error::invalid("batch and teacher embeddings must be non-empty and aligned"));
    }
    if teacher_emb[0].len() != student.dim() {
        return Err(Error::DimMismatch { expected: student.dim(), got: teacher_emb[0].len() });
    }
    let zs: Vec<Var> = batch.iter().map(|ex| student.embed_graph(g, ex.features)).collect::<Result<_>>()?;
    let z = g.concat_rows(&zs);
    match cfg.loss {
        DistillLoss::Mse => {
            let t = g.input(rows_tensor(teacher_emb));
            Ok(g.mse(z, t))
        }
        DistillLoss::Infonce => {
            if batch.len() == 1 && bank.is_empty() {
                return Err(Error::invalid("no negatives: batch of one with an empty memory bank"));
            }
            if bank.dim() != student.dim() {
                return Err(Error::DimMismatch { expected: student.dim(), got: bank.dim() });
            }
            let mut keys: Vec<Vec<f64>> = teacher_emb.to_vec();
            keys.extend(bank.iter().cloned());
            let k = g.input(rows_tensor(&keys));
            loss::infonce_graph(g, z, k, cfg.tau)
        }
    }
}

/// One optimizer step on the student; the bank then receives this batch's
/// teacher embeddings. The teacher is only read.
pub fn distill_step(
    student: &mut StudentModel,
    teacher: &Teacher,
    batch: &[Example],
    bank: &mut MemoryBank,
    cfg: &DistillConfig,
    step: u64,
) -> Result<f64> {
    let t = teacher_rows(teacher, batch)?;
    let (value, grads) = {
        let mut g = Graph::new(&student.store, Mode::Train { seed: cfg.run.step_seed(step) });
        let l = distill_loss_graph(&mut g, student, batch, &t, bank, cfg)?;
        training::loss_grads(g, l, &cfg.run, step)?
    };
    student.store.adamw_step(&grads, &cfg.run.adamw())?;
    bank.update(&t)?;
    Ok(value)
}

/// Pair set and the features of every id it names.
#[derive(Debug, Clone)]
pub struct FeatureDevSet<'a> {
    pub pairs: &'a ScoredPairSet,
    pub features: &'a BTreeMap<String, &'a FeatureSequence>,
}

impl FeatureDevSet<'_> {
    pub fn spearman(&self, embed: impl Fn(&FeatureSequence) -> Result<Vec<f64>>) -> Result<f64> {
        let mut r = BTreeMap::new();
        for id in self.pairs.ids() {
            let fs = self.features.get(id).ok_or_else(|| Error::NotFound(format!("features for {id}")))?;
            r.insert(id.to_string(), vec![embed(fs)?]);
        }
        Ok(eval::evaluate(&r, self.pairs, "dev", 0)?.report.spearman)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    /// Dev Spearman per evaluation; step 0 is the untrained student.
    pub curve: Vec<CurvePoint>,
    /// Mean student-teacher cosine over the held-out examples per evaluation.
    pub cosine: Vec<(u64, f64)>,
    pub best_dev_spearman: f64,
    pub best_step: u64,
    pub steps: u64,
}

fn mean_cosine(student: &StudentModel, held_out: &[Example], teacher_emb: &[Vec<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for (ex, t) in held_out.iter().zip(teacher_emb) {
        s += loss::cosine(&student.embed(ex.features)?, t)?;
    }
    Ok(s / held_out.len() as f64)
}

/// Epochs of `distill_step` over shuffled batches with keep-best on dev Spearman.
/// The bank persists across epochs.
pub fn distill_train(
    student: &mut StudentModel,
    teacher: &Teacher,
    train: &[Example],
    held_out: &[Example],
    dev: &FeatureDevSet,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if teacher.dim() != student.dim() {
        return Err(Error::DimMismatch { expected: student.dim(), got: teacher.dim() });
    }
    let run = &cfg.run;
    let held_out = if held_out.is_empty() { &train[..train.len().min(64)] } else { held_out };
    let held_t = teacher_rows(teacher, held_out)?;
    let mut bank = MemoryBank::new(cfg.bank_capacity, student.dim())?;
    let init = dev.spearman(|f| student.embed(f))?;
    let mut keep = KeepBest::higher_is_better();
    keep.observe(init, 0, &student.store);
    let mut curve = vec![CurvePoint { step: 0, train_loss: None, dev: init }];
    let mut cosine = vec![(0, mean_cosine(student, held_out, &held_t)?)];
    let mut step = 0u64;
    for epoch in 0..run.epochs {
        let batches = training::epoch_batches(train.len(), run.batch_size, run.seed, epoch);
        let evals = training::eval_points(batches.len(), run.evals_per_epoch);
        let (mut acc, mut n) = (0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i]).collect();
            if batch.len() == 1 && bank.is_empty() && cfg.loss == DistillLoss::Infonce {
                continue;
            }
            acc += distill_step(student, teacher, &batch, &mut bank, cfg, step)?;
            n += 1;
            step += 1;
            if evals.contains(&(bi + 1)) {
                let rho = dev.spearman(|f| student.embed(f))?;
                keep.observe(rho, step, &student.store);
                curve.push(CurvePoint { step, train_loss: Some(acc / n.max(1) as f64), dev: rho });
                cosine.push((step, mean_cosine(student, held_out, &held_t)?));
                acc = 0.0;
                n = 0;
            }
        }
    }
    let best_dev_spearman = keep.best().expect("observed");
    let best_step = keep.best_step();
    keep.restore(&mut student.store)?;
    Ok(DistillReport { curve, cosine, best_dev_spearman, best_step, steps: step })
}
