//! Sequence autoencoder over frame features: encoder, attention pooling to a
//! single vector, and an autoregressive decoder that rebuilds a discrete target
//! sequence from that vector alone.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, Utterance};
use crate::error::{Error, Result};
use crate::nn::{
    loss, tensor_from_f32, AttentionPool, Checkpoint, Conditioning, Decoder, Encoder, EncoderConfig, Graph, Mode,
    ParamStore, Var,
};
use crate::rng;
use crate::tokenizer::{CLS, N_SPECIALS, SEP};
use crate::training::{self, CurvePoint, KeepBest, TrainRunConfig};

pub const CHECKPOINT_KIND: &str = "wavembed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Units,
    Tokens,
    Text,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "units" => Ok(TargetMode::Units),
            "tokens" => Ok(TargetMode::Tokens),
            "text" => Ok(TargetMode::Text),
            _ => Err(Error::validation("target_mode", format!("unknown mode {s:?}; expected units, tokens or text"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavEmbedConfig {
    pub feature_dim: usize,
    /// Decoder vocabulary including the special tokens.
    pub vocab_size: usize,
    #[serde(default)]
    pub target_mode: TargetMode,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: EncoderConfig,
    #[serde(default)]
    pub conditioning: Conditioning,
    /// Longest target accepted, CLS and SEP included.
    #[serde(default = "d_max_target")]
    pub max_target_len: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn d_max_target() -> usize {
    128
}

impl WavEmbedConfig {
    pub fn new(feature_dim: usize, vocab_size: usize) -> Self {
        WavEmbedConfig {
            feature_dim,
            vocab_size,
            target_mode: TargetMode::default(),
            encoder: EncoderConfig::default(),
            decoder: EncoderConfig::default(),
            conditioning: Conditioning::default(),
            max_target_len: d_max_target(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim", "must be positive"));
        }
        if self.vocab_size <= N_SPECIALS as usize {
            return Err(Error::validation("vocab_size", "must exceed the special tokens"));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.model_dim != self.decoder.model_dim {
            return Err(Error::validation("decoder.model_dim", "must equal encoder.model_dim"));
        }
        if self.max_target_len < 2 {
            return Err(Error::validation("max_target_len", "must allow CLS and SEP"));
        }
        if self.max_target_len > self.decoder.max_positions + 1 {
            return Err(Error::validation("max_target_len", "exceeds decoder.max_positions + 1"));
        }
        Ok(())
    }
}

/// Wraps raw unit ids as decoder targets: `CLS, u + 5, ..., SEP`.
pub fn unit_target(units: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(units.len() + 2);
    out.push(CLS);
    out.extend(units.iter().map(|&u| u + N_SPECIALS));
    out.push(SEP);
    out
}

#[derive(Debug, Clone)]
pub struct WavEmbedModel {
    pub config: WavEmbedConfig,
    pub store: ParamStore,
    encoder: Encoder,
    pool: AttentionPool,
    decoder: Decoder,
}

impl WavEmbedModel {
    pub fn new(config: WavEmbedConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::rng(config.init_seed, "wavembed-init", 0);
        let encoder = Encoder::new(&mut store, "encoder", config.encoder, Some(config.feature_dim), &mut r)?;
        let pool = AttentionPool::new(&mut store, "pool", config.encoder.model_dim, &mut r);
        let decoder =
            Decoder::new(&mut store, "decoder", config.decoder, config.vocab_size, config.conditioning, &mut r)?;
        Ok(WavEmbedModel { config, store, encoder, pool, decoder })
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.model_dim
    }

    /// Pooled `1 x d` vector inside `g`.
    pub fn encode_graph(&self, g: &mut Graph, fs: &FeatureSequence) -> Result<Var> {
        if fs.dim() != self.config.feature_dim {
            return Err(Error::DimMismatch { expected: self.config.feature_dim, got: fs.dim() });
        }
        let x = g.input(tensor_from_f32(fs.n_frames(), fs.dim(), fs.data()));
        self.encode_input(g, x)
    }

    /// Pools a `T x feature_dim` graph value.
    pub fn encode_input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.encoder.forward(g, x)?;
        self.pool.forward(g, h)
    }

    /// Eval-mode embedding; touches only encoder and pooling parameters.
    pub fn embed(&self, fs: &FeatureSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = self.encode_graph(&mut g, fs)?;
        Ok(g.value(z).data().to_vec())
    }

    fn check_target(&self, target: &[u32]) -> Result<()> {
        if target.len() < 2 || target[0] != CLS {
            return Err(Error::invalid("target must start with CLS and hold at least one more token"));
        }
        if target.len() > self.config.max_target_len {
            return Err(Error::validation(
                "max_target_len",
                format!("target of length {} exceeds {}", target.len(), self.config.max_target_len),
            ));
        }
        Ok(())
    }

    /// Teacher-forced NLL of `target[1..]` given `target[..n-1]` and `z`.
    pub fn loss_graph(&self, g: &mut Graph, fs: &FeatureSequence, target: &[u32]) -> Result<Var> {
        if fs.dim() != self.config.feature_dim {
            return Err(Error::DimMismatch { expected: self.config.feature_dim, got: fs.dim() });
        }
        let x = g.input(tensor_from_f32(fs.n_frames(), fs.dim(), fs.data()));
        self.loss_from_input(g, x, target)
    }

    /// As `loss_graph`, with the features already in the graph.
    pub fn loss_from_input(&self, g: &mut Graph, x: Var, target: &[u32]) -> Result<Var> {
        self.check_target(target)?;
        let z = self.encode_input(g, x)?;
        let n = target.len();
        let logits = self.decoder.forward(g, &target[..n - 1], z)?;
        loss::nll_graph(g, logits, &target[1..])
    }

    pub fn reconstruction_loss(&self, fs: &FeatureSequence, target: &[u32]) -> Result<f64> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let l = self.loss_graph(&mut g, fs, target)?;
        Ok(g.value(l).item())
    }

    /// Argmax decoding from CLS until SEP or `max_len` tokens (CLS included).
    pub fn greedy_decode(&self, fs: &FeatureSequence, max_len: usize) -> Result<Vec<u32>> {
        let max_len = max_len.min(self.config.decoder.max_positions).max(1);
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = self.encode_graph(&mut g, fs)?;
        let zt = g.value(z).clone();
        let mut out = vec![CLS];
        while out.len() < max_len {
            let mut g = Graph::new(&self.store, Mode::Eval);
            let z = g.input(zt.clone());
            let logits = self.decoder.step(&mut g, &out, z)?;
            let row = g.value(logits).row(0);
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            out.push(best as u32);
            if best as u32 == SEP {
                break;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(&self.config).expect("config serializes"), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: WavEmbedConfig = serde_json::from_value(ck.config.clone())?;
        let mut model = WavEmbedModel::new(config)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }
}

/// One training pair: features and their decoder target.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub id: &'a str,
    pub features: &'a FeatureSequence,
    pub target: &'a [u32],
}

/// Joins utterances with their targets; a missing target is an error naming the id.
pub fn examples<'a>(utts: &'a [Utterance], targets: &'a HashMap<String, Vec<u32>>) -> Result<Vec<Example<'a>>> {
    utts.iter()
        .map(|u| {
            let target = targets.get(&u.id).ok_or_else(|| Error::NotFound(format!("target sequence for utterance {}", u.id)))?;
            Ok(Example { id: &u.id, features: &u.features, target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub init_dev_loss: f64,
    pub best_dev_loss: f64,
    pub best_step: u64,
    pub steps: u64,
}

pub fn mean_loss(model: &WavEmbedModel, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for ex in data {
        total += model
            .reconstruction_loss(ex.features, ex.target)
            .map_err(|e| Error::invalid(format!("utterance {}: {e}", ex.id)))?;
    }
    Ok(total / data.len() as f64)
}

/// AdamW training with keep-best on dev loss; the model ends at its best snapshot.
pub fn train(model: &mut WavEmbedModel, train: &[Example], dev: &[Example], cfg: &TrainRunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for ex in train.iter().chain(dev) {
        model.check_target(ex.target).map_err(|e| Error::invalid(format!("utterance {}: {e}", ex.id)))?;
    }
    let dev_set = if dev.is_empty() { train } else { dev };
    let init = mean_loss(model, dev_set)?;
    let mut keep = KeepBest::lower_is_better();
    keep.observe(init, 0, &model.store);
    let mut curve = vec![CurvePoint { step: 0, train_loss: None, dev: init }];
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = training::epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let evals = training::eval_points(batches.len(), cfg.evals_per_epoch);
        let (mut run_loss, mut run_n) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let value = {
                let mut g = Graph::new(&model.store, Mode::Train { seed: cfg.step_seed(step) });
                let mut parts = Vec::with_capacity(batch.len());
                for &i in batch {
                    parts.push(model.loss_graph(&mut g, train[i].features, train[i].target)?);
                }
                let cat = g.concat_rows(&parts);
                let s = g.sum(cat);
                let l = g.scale(s, 1.0 / batch.len() as f64);
                training::loss_grads(g, l, cfg, step)?
            };
            model.store.adamw_step(&value.1, &cfg.adamw())?;
            step += 1;
            run_loss += value.0;
            run_n += 1;
            if evals.contains(&(bi + 1)) {
                let dev_loss = mean_loss(model, dev_set)?;
                keep.observe(dev_loss, step, &model.store);
                curve.push(CurvePoint { step, train_loss: Some(run_loss / run_n as f64), dev: dev_loss });
                run_loss = 0.0;
                run_n = 0;
            }
        }
    }
    let best_dev_loss = keep.best().expect("observed at init");
    let best_step = keep.best_step();
    keep.restore(&mut model.store)?;
    Ok(TrainReport { curve, init_dev_loss: init, best_dev_loss, best_step, steps: step })
}
