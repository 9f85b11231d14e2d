//! Token-sequence embedding teachers: masked-LM pretraining, a denoising
//! autoencoder with token deletion, and dropout-positive contrastive training.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::ScoredPairSet;
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{
    loss, Checkpoint, Conditioning, Decoder, Embedding, Encoder, EncoderConfig, Graph, Linear, Mode, ParamStore, Var, OUTPUT_STD,
};
use crate::rng::{self, Rng};
use crate::tokenizer::{is_special, CLS, MASK, N_SPECIALS, SEP};
use crate::training::{self, CurvePoint, EarlyStopper, KeepBest, TrainRunConfig};

pub const MLM_KIND: &str = "mlm";
pub const TEACHER_KIND: &str = "teacher";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over the positions strictly between CLS and SEP.
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEncoderConfig {
    pub vocab_size: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pooling: Pooling,
}

impl SequenceEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= N_SPECIALS as usize {
            return Err(Error::validation("vocab_size", "must exceed the special tokens"));
        }
        self.encoder.validate()
    }
}

/// Token embeddings feeding a transformer encoder, pooled to one vector.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub config: SequenceEncoderConfig,
    embed: Embedding,
    encoder: Encoder,
}

impl SequenceEncoder {
    pub fn new(store: &mut ParamStore, config: SequenceEncoderConfig, r: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embed = Embedding::new(store, "seq", config.vocab_size, config.encoder.model_dim, r);
        let encoder = Encoder::new(store, "seq.encoder", config.encoder, None, r)?;
        Ok(SequenceEncoder { config, embed, encoder })
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.model_dim
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.encoder.config.dropout = rate;
    }

    /// Contextual states, `T x d`.
    pub fn states(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let e = self.embed.forward(g, tokens)?;
        self.encoder.forward_embedded(g, e)
    }

    pub fn pool(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        check_wrapped(tokens)?;
        let h = self.states(g, tokens)?;
        match self.config.pooling {
            Pooling::Cls => Ok(g.slice_rows(h, 0, 1)),
            Pooling::Mean => {
                let inner = g.slice_rows(h, 1, tokens.len() - 2);
                Ok(g.mean_rows(inner))
            }
        }
    }
}

fn check_wrapped(tokens: &[u32]) -> Result<()> {
    if tokens.len() < 3 || tokens[0] != CLS || tokens[tokens.len() - 1] != SEP {
        return Err(Error::invalid("token sequence must be CLS, at least one token, SEP"));
    }
    Ok(())
}

// ---------------------------------------------------------------- masked LM

#[derive(Debug, Clone)]
pub struct MlmModel {
    pub store: ParamStore,
    pub encoder: SequenceEncoder,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmConfig {
    #[serde(default = "d_mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "d_mlm_steps")]
    pub steps: usize,
    #[serde(default = "d_mlm_batch")]
    pub batch_size: usize,
    #[serde(default = "d_mlm_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_mask_rate() -> f64 {
    0.15
}
fn d_mlm_steps() -> usize {
    500
}
fn d_mlm_batch() -> usize {
    16
}
fn d_mlm_lr() -> f64 {
    1e-3
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig { mask_rate: d_mask_rate(), steps: d_mlm_steps(), batch_size: d_mlm_batch(), lr: d_mlm_lr(), seed: 0 }
    }
}

impl MlmModel {
    pub fn new(config: SequenceEncoderConfig, init_seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::rng(init_seed, "mlm-init", 0);
        let encoder = SequenceEncoder::new(&mut store, config, &mut r)?;
        let head = Linear::with_std(&mut store, "mlm.head", encoder.dim(), encoder.config.vocab_size, OUTPUT_STD, &mut r);
        Ok(MlmModel { store, encoder, head })
    }

    /// Masked-position cross-entropy for one masked sequence.
    pub fn loss_graph(&self, g: &mut Graph, masked: &MaskedSequence) -> Result<Var> {
        let h = self.encoder.states(g, &masked.input)?;
        let logits = self.head.forward(g, h);
        Ok(g.cross_entropy(logits, &masked.labels))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(MLM_KIND, serde_json::to_value(&self.encoder.config).expect("serializes"), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(MLM_KIND)?;
        let config: SequenceEncoderConfig = serde_json::from_value(ck.config.clone())?;
        let mut m = MlmModel::new(config, 0)?;
        ck.apply_to(&mut m.store)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    /// Original token at masked positions, `None` elsewhere.
    pub labels: Vec<Option<usize>>,
}

/// Number of positions masked out of `eligible`: `max(1, round(rate * eligible))`.
pub fn mask_count(eligible: usize, rate: f64) -> usize {
    ((rate * eligible as f64).round() as usize).clamp(1, eligible.max(1))
}

/// Masks non-special positions: of those chosen, 80% become MASK, 10% a random
/// regular token and 10% stay unchanged. `None` when nothing is eligible.
pub fn mask_tokens(tokens: &[u32], rate: f64, vocab_size: usize, r: &mut Rng) -> Result<Option<MaskedSequence>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::validation("mask_rate", "must lie in (0, 1]; a zero rate masks nothing to learn from"));
    }
    let eligible: Vec<usize> = (0..tokens.len()).filter(|&i| !is_special(tokens[i])).collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let n = mask_count(eligible.len(), rate);
    let chosen = rand::seq::index::sample(r, eligible.len(), n);
    let mut input = tokens.to_vec();
    let mut labels = vec![None; tokens.len()];
    for c in chosen.iter() {
        let pos = eligible[c];
        labels[pos] = Some(tokens[pos] as usize);
        let u: f64 = r.gen();
        if u < 0.8 {
            input[pos] = MASK;
        } else if u < 0.9 {
            input[pos] = r.gen_range(N_SPECIALS..vocab_size as u32);
        }
    }
    Ok(Some(MaskedSequence { input, labels }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlmReport {
    /// Mean masked-token loss per logged window of steps.
    pub curve: Vec<(u64, f64)>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

pub fn mlm_pretrain(model: &mut MlmModel, corpus: &[Vec<u32>], cfg: &MlmConfig) -> Result<MlmReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty token corpus"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::validation("steps", "steps and batch_size must be positive"));
    }
    let vocab = model.encoder.config.vocab_size;
    let run = TrainRunConfig { lr: cfg.lr, batch_size: cfg.batch_size, seed: cfg.seed, ..Default::default() };
    let mut warnings = Vec::new();
    let mut skip = vec![false; corpus.len()];
    for (i, seq) in corpus.iter().enumerate() {
        if seq.iter().all(|&t| is_special(t)) {
            skip[i] = true;
            warnings.push(format!("sequence {i} holds only special tokens; skipped"));
        }
    }
    let usable: Vec<usize> = (0..corpus.len()).filter(|&i| !skip[i]).collect();
    if usable.is_empty() {
        return Err(Error::invalid("every sequence holds only special tokens"));
    }
    let mut curve = Vec::new();
    let (mut window, mut wn) = (0.0, 0usize);
    let log_every = (cfg.steps / 20).max(1);
    let mut epoch = 0;
    let mut batches = Vec::new();
    for step in 0..cfg.steps as u64 {
        if batches.is_empty() {
            batches = training::epoch_batches(usable.len(), cfg.batch_size, cfg.seed, epoch);
            batches.reverse();
            epoch += 1;
        }
        let batch = batches.pop().expect("refilled");
        let mut r = rng::rng(cfg.seed, "mlm-mask", step);
        let (value, grads) = {
            let mut g = Graph::new(&model.store, Mode::Train { seed: run.step_seed(step) });
            let mut parts = Vec::new();
            for &bi in &batch {
                let seq = &corpus[usable[bi]];
                if let Some(m) = mask_tokens(seq, cfg.mask_rate, vocab, &mut r)? {
                    parts.push(model.loss_graph(&mut g, &m)?);
                }
            }
            let cat = g.concat_rows(&parts);
            let s = g.sum(cat);
            let l = g.scale(s, 1.0 / parts.len() as f64);
            training::loss_grads(g, l, &run, step)?
        };
        model.store.adamw_step(&grads, &run.adamw())?;
        window += value;
        wn += 1;
        if (step + 1) % log_every as u64 == 0 || step + 1 == cfg.steps as u64 {
            curve.push((step + 1, window / wn as f64));
            window = 0.0;
            wn = 0;
        }
    }
    Ok(MlmReport { curve, skipped: corpus.len() - usable.len(), warnings })
}

// ---------------------------------------------------------------- deletion

/// Deletes each interior token independently with probability `ratio`; CLS and
/// SEP stay. If every interior token goes, one uniformly chosen survivor is kept.
pub fn delete_tokens(seq: &[u32], ratio: f64, r: &mut Rng) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation("deletion_ratio", "must lie in [0, 1]"));
    }
    check_wrapped(seq)?;
    let inner = &seq[1..seq.len() - 1];
    let mut kept: Vec<u32> = inner.iter().copied().filter(|_| r.gen::<f64>() >= ratio).collect();
    if kept.is_empty() {
        kept.push(inner[r.gen_range(0..inner.len())]);
    }
    let mut out = Vec::with_capacity(kept.len() + 2);
    out.push(CLS);
    out.extend(kept);
    out.push(SEP);
    Ok(out)
}

// ---------------------------------------------------------------- teachers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    #[default]
    Tsdae,
    Simcse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default)]
    pub kind: TeacherKind,
    #[serde(default)]
    pub deletion_ratio: f64,
    #[serde(default = "d_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    /// Stale dev evaluations tolerated before SimCSE stops.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default)]
    pub run: TrainRunConfig,
}

fn d_dropout() -> f64 {
    0.1
}
fn d_tau() -> f64 {
    0.05
}
fn d_patience() -> usize {
    80
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::default(),
            deletion_ratio: 0.0,
            dropout_rate: d_dropout(),
            tau: d_tau(),
            patience: d_patience(),
            run: TrainRunConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.deletion_ratio) {
            return Err(Error::validation("deletion_ratio", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::validation("tau", "must be positive"));
        }
        self.run.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherModelConfig {
    pub kind: TeacherKind,
    pub sequence: SequenceEncoderConfig,
    /// Present for denoising teachers.
    #[serde(default)]
    pub decoder: Option<EncoderConfig>,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub config: TeacherModelConfig,
    pub store: ParamStore,
    pub encoder: SequenceEncoder,
    decoder: Option<Decoder>,
}

impl Teacher {
    pub fn new(config: TeacherModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::rng(config.init_seed, "teacher-init", 0);
        let encoder = SequenceEncoder::new(&mut store, config.sequence.clone(), &mut r)?;
        let decoder = match (config.kind, config.decoder) {
            (TeacherKind::Tsdae, Some(dc)) => {
                if dc.model_dim != encoder.dim() {
                    return Err(Error::validation("decoder.model_dim", "must equal encoder.model_dim"));
                }
                Some(Decoder::new(&mut store, "decoder", dc, config.sequence.vocab_size, Conditioning::CrossAttention, &mut r)?)
            }
            (TeacherKind::Tsdae, None) => return Err(Error::validation("decoder", "a denoising teacher needs a decoder")),
            (TeacherKind::Simcse, _) => None,
        };
        Ok(Teacher { config, store, encoder, decoder })
    }

    /// Copies the encoder weights of a pretrained masked LM.
    pub fn init_from_mlm(&mut self, mlm: &MlmModel) -> Result<usize> {
        if mlm.encoder.config != self.encoder.config {
            return Err(Error::invalid("masked-LM encoder config differs from the teacher's"));
        }
        Ok(self.store.copy_matching(&mlm.store, |n| n.starts_with("seq").then(|| n.to_string())))
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Eval-mode pooled embedding.
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.sequence.vocab_size) {
            return Err(Error::validation("token", format!("id {bad} outside teacher vocabulary of {}", self.config.sequence.vocab_size)));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = self.encoder.pool(&mut g, tokens)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Reconstruction NLL of `target` from the pooled embedding of `input`.
    pub fn tsdae_loss_graph(&self, g: &mut Graph, input: &[u32], target: &[u32]) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or_else(|| Error::invalid("teacher has no decoder"))?;
        check_wrapped(target)?;
        let z = self.encoder.pool(g, input)?;
        let n = target.len();
        let logits = dec.forward(g, &target[..n - 1], z)?;
        loss::nll_graph(g, logits, &target[1..])
    }

    /// In-batch contrastive loss over two dropout passes. Always in train mode:
    /// in eval mode the two views coincide and the task is degenerate.
    pub fn simcse_loss_graph(&self, g: &mut Graph, batch: &[&[u32]], tau: f64) -> Result<Var> {
        if !g.is_train() {
            return Err(Error::invalid("contrastive views need train-mode dropout"));
        }
        if self.encoder.encoder.config.dropout <= 0.0 {
            return Err(Error::validation("dropout_rate", "must be positive: both views would be identical"));
        }
        if batch.len() < 2 {
            return Err(Error::invalid("contrastive batch needs at least two sequences"));
        }
        let first: Vec<Var> = batch.iter().map(|s| self.encoder.pool(g, s)).collect::<Result<_>>()?;
        let second: Vec<Var> = batch.iter().map(|s| self.encoder.pool(g, s)).collect::<Result<_>>()?;
        let a = g.concat_rows(&first);
        let b = g.concat_rows(&second);
        loss::infonce_graph(g, a, b, tau)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(TEACHER_KIND, serde_json::to_value(&self.config).expect("serializes"), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(TEACHER_KIND)?;
        let config: TeacherModelConfig = serde_json::from_value(ck.config.clone())?;
        let mut t = Teacher::new(config)?;
        ck.apply_to(&mut t.store)?;
        Ok(t)
    }
}

/// Pair set plus the token sequence of every id in it.
#[derive(Debug, Clone)]
pub struct TokenDevSet<'a> {
    pub pairs: &'a ScoredPairSet,
    pub tokens: &'a HashMap<String, Vec<u32>>,
}

impl TokenDevSet<'_> {
    pub fn spearman(&self, embed: impl Fn(&[u32]) -> Result<Vec<f64>>) -> Result<f64> {
        let mut r = BTreeMap::new();
        for id in self.pairs.ids() {
            let t = self.tokens.get(id).ok_or_else(|| Error::NotFound(format!("token sequence for {id}")))?;
            r.insert(id.to_string(), vec![embed(t)?]);
        }
        Ok(eval::evaluate(&r, self.pairs, "dev", 0)?.report.spearman)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherReport {
    /// `dev` is the dev loss for denoising teachers, dev Spearman for contrastive ones.
    pub curve: Vec<CurvePoint>,
    pub best_step: u64,
    pub best: f64,
    pub steps: u64,
    pub stopped_early: bool,
    pub dev_spearman: Option<f64>,
}

fn deterministic_corruption(seqs: &[Vec<u32>], ratio: f64, seed: u64) -> Result<Vec<Vec<u32>>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| delete_tokens(s, ratio, &mut rng::rng(seed, "dev-deletion", i as u64)))
        .collect()
}

fn tsdae_dev_loss(t: &Teacher, inputs: &[Vec<u32>], targets: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    for (i, o) in inputs.iter().zip(targets) {
        let mut g = Graph::new(&t.store, Mode::Eval);
        let l = t.tsdae_loss_graph(&mut g, i, o)?;
        total += g.value(l).item();
    }
    Ok(total / targets.len() as f64)
}

/// Denoising autoencoder training with keep-best on dev reconstruction loss.
pub fn train_tsdae(
    teacher: &mut Teacher,
    train: &[Vec<u32>],
    dev: &[Vec<u32>],
    cfg: &TeacherConfig,
    dev_pairs: Option<&TokenDevSet>,
) -> Result<TeacherReport> {
    cfg.validate()?;
    if cfg.kind != TeacherKind::Tsdae || teacher.config.kind != TeacherKind::Tsdae {
        return Err(Error::invalid("train_tsdae needs a denoising teacher and config"));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for s in train.iter().chain(dev) {
        check_wrapped(s)?;
    }
    let run = &cfg.run;
    teacher.encoder.set_dropout(cfg.dropout_rate);
    let dev = if dev.is_empty() { train } else { dev };
    let dev_inputs = deterministic_corruption(dev, cfg.deletion_ratio, run.seed)?;
    let init = tsdae_dev_loss(teacher, &dev_inputs, dev)?;
    let mut keep = KeepBest::lower_is_better();
    keep.observe(init, 0, &teacher.store);
    let mut curve = vec![CurvePoint { step: 0, train_loss: None, dev: init }];
    let mut step = 0u64;
    for epoch in 0..run.epochs {
        let batches = training::epoch_batches(train.len(), run.batch_size, run.seed, epoch);
        let evals = training::eval_points(batches.len(), run.evals_per_epoch);
        let (mut acc, mut n) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let mut r = rng::rng(run.seed, "deletion", step);
            let (value, grads) = {
                let mut g = Graph::new(&teacher.store, Mode::Train { seed: run.step_seed(step) });
                let mut parts = Vec::with_capacity(batch.len());
                for &i in batch {
                    let input = delete_tokens(&train[i], cfg.deletion_ratio, &mut r)?;
                    parts.push(teacher.tsdae_loss_graph(&mut g, &input, &train[i])?);
                }
                let cat = g.concat_rows(&parts);
                let s = g.sum(cat);
                let l = g.scale(s, 1.0 / batch.len() as f64);
                training::loss_grads(g, l, run, step)?
            };
            teacher.store.adamw_step(&grads, &run.adamw())?;
            step += 1;
            acc += value;
            n += 1;
            if evals.contains(&(bi + 1)) {
                let d = tsdae_dev_loss(teacher, &dev_inputs, dev)?;
                keep.observe(d, step, &teacher.store);
                curve.push(CurvePoint { step, train_loss: Some(acc / n as f64), dev: d });
                acc = 0.0;
                n = 0;
            }
        }
    }
    let best = keep.best().expect("observed");
    let best_step = keep.best_step();
    keep.restore(&mut teacher.store)?;
    let dev_spearman = dev_pairs.map(|d| d.spearman(|t| teacher.embed(t))).transpose()?;
    Ok(TeacherReport { curve, best_step, best, steps: step, stopped_early: false, dev_spearman })
}

/// Contrastive training with early stopping and keep-best on dev Spearman.
pub fn train_simcse(teacher: &mut Teacher, train: &[Vec<u32>], cfg: &TeacherConfig, dev: &TokenDevSet) -> Result<TeacherReport> {
    cfg.validate()?;
    if cfg.kind != TeacherKind::Simcse {
        return Err(Error::invalid("train_simcse needs a contrastive config"));
    }
    if cfg.dropout_rate <= 0.0 {
        return Err(Error::validation("dropout_rate", "must be positive: both views would be identical"));
    }
    if train.len() < 2 {
        return Err(Error::invalid("contrastive training needs at least two sequences"));
    }
    let run = &cfg.run;
    teacher.encoder.set_dropout(cfg.dropout_rate);
    let init = dev.spearman(|t| teacher.embed(t))?;
    let mut keep = KeepBest::higher_is_better();
    keep.observe(init, 0, &teacher.store);
    let mut stopper = EarlyStopper::new(cfg.patience);
    stopper.update(init);
    let mut curve = vec![CurvePoint { step: 0, train_loss: None, dev: init }];
    let mut step = 0u64;
    let mut stopped_early = false;
    'outer: for epoch in 0..run.epochs {
        let batches = training::epoch_batches(train.len(), run.batch_size, run.seed, epoch);
        let evals = training::eval_points(batches.len(), run.evals_per_epoch);
        let (mut acc, mut n) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let (value, grads) = {
                let mut g = Graph::new(&teacher.store, Mode::Train { seed: run.step_seed(step) });
                let seqs: Vec<&[u32]> = batch.iter().map(|&i| train[i].as_slice()).collect();
                let l = teacher.simcse_loss_graph(&mut g, &seqs, cfg.tau)?;
                training::loss_grads(g, l, run, step)?
            };
            teacher.store.adamw_step(&grads, &run.adamw())?;
            step += 1;
            acc += value;
            n += 1;
            if evals.contains(&(bi + 1)) {
                let rho = dev.spearman(|t| teacher.embed(t))?;
                keep.observe(rho, step, &teacher.store);
                curve.push(CurvePoint { step, train_loss: Some(acc / n.max(1) as f64), dev: rho });
                acc = 0.0;
                n = 0;
                if stopper.update(rho) {
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
    }
    let best = keep.best().expect("observed");
    let best_step = keep.best_step();
    keep.restore(&mut teacher.store)?;
    Ok(TeacherReport { curve, best_step, best, steps: step, stopped_early, dev_spearman: Some(best) })
}
