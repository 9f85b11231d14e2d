use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_model")]
    pub model_dim: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ff")]
    pub ff_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_positions")]
    pub max_positions: usize,
}

fn d_layers() -> usize {
    2
}
fn d_model() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_ff() -> usize {
    128
}
fn d_dropout() -> f64 {
    0.1
}
fn d_positions() -> usize {
    512
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: d_layers(),
            model_dim: d_model(),
            heads: d_heads(),
            ff_dim: d_ff(),
            dropout: d_dropout(),
            max_positions: d_positions(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 {
            return Err(Error::validation("model_dim", "must be positive"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::validation("heads", format!("must divide model_dim {}", self.model_dim)));
        }
        if self.ff_dim == 0 {
            return Err(Error::validation("ff_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout", "must lie in [0, 1)"));
        }
        if self.max_positions == 0 {
            return Err(Error::validation("max_positions", "must be positive"));
        }
        Ok(())
    }

    pub fn without_dropout(mut self) -> Self {
        self.dropout = 0.0;
        self
    }
}

/// Standard sinusoidal table, `t x d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(t, d);
    for pos in 0..t {
        let row = out.row_mut(pos);
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Init scale of vocabulary projections, small so untrained logits are near uniform.
pub const OUTPUT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self::with_std(store, name, d_in, d_out, (1.0 / d_in as f64).sqrt(), rng)
    }

    pub fn with_std(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        let w = store.add_normal(format!("{name}.w"), d_in, d_out, std, rng);
        let b = store.add_const(format!("{name}.b"), 1, d_out, 0.0);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), 1, d, 1.0);
        let beta = store.add_const(format!("{name}.beta"), 1, d, 0.0);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `memory`.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> Var {
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let mut s = g.scale(s, scale);
            if causal {
                s = g.causal_mask(s);
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, ff, rng),
            down: Linear::new(store, &format!("{name}.down"), ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm transformer encoder with an optional input projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Option<Linear>,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
}

impl Encoder {
    /// `d_in = None` means inputs arrive already embedded at `model_dim`.
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, d_in: Option<usize>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let input = d_in.map(|n| Linear::new(store, &format!("{name}.input"), n, d, rng));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, config.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_dim, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), d);
        Ok(Encoder { config, input, blocks, final_ln })
    }

    pub fn input_dim(&self, store: &ParamStore) -> Option<usize> {
        self.input.map(|l| store.get(l.w).rows())
    }

    /// Projects raw `T x d_in` inputs, then runs the stack.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = match self.input {
            Some(lin) => {
                let d_in = g.params().get(lin.w).rows();
                let got = g.shape(x)[1];
                if got != d_in {
                    return Err(Error::DimMismatch { expected: d_in, got });
                }
                lin.forward(g, x)
            }
            None => x,
        };
        self.forward_embedded(g, h)
    }

    /// Runs the stack on `T x d` inputs that are already at model width.
    pub fn forward_embedded(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let [t, d] = g.shape(h);
        if t == 0 {
            return Err(Error::invalid("encoder input has no positions"));
        }
        if t > self.config.max_positions {
            return Err(Error::validation("max_positions", format!("sequence length {t} exceeds {}", self.config.max_positions)));
        }
        if d != self.config.model_dim {
            return Err(Error::DimMismatch { expected: self.config.model_dim, got: d });
        }
        let pe = g.input(sinusoidal_positions(t, d));
        let mut h = g.add(h, pe);
        h = g.dropout(h, self.config.dropout);
        for b in &self.blocks {
            let n = b.ln1.forward(g, h);
            let a = b.attn.forward(g, n, n, false);
            let a = g.dropout(a, self.config.dropout);
            h = g.add(h, a);
            let n = b.ln2.forward(g, h);
            let f = b.ff.forward(g, n);
            let f = g.dropout(f, self.config.dropout);
            h = g.add(h, f);
        }
        Ok(self.final_ln.forward(g, h))
    }
}

/// Self-attention pooling: `z = softmax(w·Hᵀ)·H`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    pub w: ParamId,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        AttentionPool { w: store.add_normal(format!("{name}.W"), 1, d, (1.0 / d as f64).sqrt(), rng) }
    }

    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w = g.param(self.w);
        attention_pool(g, h, w)
    }
}

pub fn attention_pool(g: &mut Graph, h: Var, w: Var) -> Result<Var> {
    let [t, d] = g.shape(h);
    if t == 0 {
        return Err(Error::invalid("attention_pool over zero frames"));
    }
    if g.shape(w) != [1, d] {
        return Err(Error::DimMismatch { expected: d, got: g.shape(w)[1] });
    }
    let s = g.matmul_t(w, h);
    let a = g.softmax(s);
    Ok(g.matmul(a, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `z` is the single key/value slot of a cross-attention sublayer.
    #[default]
    CrossAttention,
    /// `z` is added to every input embedding; no cross-attention.
    Additive,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Autoregressive decoder conditioned only on a pooled vector.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub conditioning: Conditioning,
    embed: ParamId,
    blocks: Vec<DecoderBlock>,
    final_ln: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        vocab_size: usize,
        conditioning: Conditioning,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::validation("vocab_size", "must be positive"));
        }
        let d = config.model_dim;
        let embed = store.add_normal(format!("{name}.embed"), vocab_size, d, 1.0, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                let cross = (conditioning == Conditioning::CrossAttention).then(|| {
                    (
                        LayerNorm::new(store, &format!("{p}.ln2"), d),
                        MultiHeadAttention::new(store, &format!("{p}.cross"), d, config.heads, rng),
                    )
                });
                DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, config.heads, rng),
                    cross,
                    ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_dim, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), d);
        let out = Linear::with_std(store, &format!("{name}.out"), d, vocab_size, OUTPUT_STD, rng);
        Ok(Decoder { config, vocab_size, conditioning, embed, blocks, final_ln, out })
    }

    /// Teacher-forced logits, one row per prefix position (`T x V`).
    pub fn forward(&self, g: &mut Graph, prev_tokens: &[u32], z: Var) -> Result<Var> {
        let t = prev_tokens.len();
        if t == 0 {
            return Err(Error::invalid("decoder prefix is empty"));
        }
        if t > self.config.max_positions {
            return Err(Error::validation("max_positions", format!("prefix length {t} exceeds {}", self.config.max_positions)));
        }
        if let Some(&bad) = prev_tokens.iter().find(|&&tok| tok as usize >= self.vocab_size) {
            return Err(Error::validation("token", format!("id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let d = self.config.model_dim;
        if g.shape(z) != [1, d] {
            return Err(Error::DimMismatch { expected: d, got: g.shape(z)[1] });
        }
        let idx: Vec<usize> = prev_tokens.iter().map(|&tok| tok as usize).collect();
        let table = g.param(self.embed);
        let mut h = g.gather(table, &idx);
        let pe = g.input(sinusoidal_positions(t, d));
        h = g.add(h, pe);
        if self.conditioning == Conditioning::Additive {
            let zr = g.concat_rows(&vec![z; t]);
            h = g.add(h, zr);
        }
        h = g.dropout(h, self.config.dropout);
        for b in &self.blocks {
            let n = b.ln1.forward(g, h);
            let a = b.self_attn.forward(g, n, n, true);
            let a = g.dropout(a, self.config.dropout);
            h = g.add(h, a);
            if let Some((ln, cross)) = &b.cross {
                let n = ln.forward(g, h);
                let c = cross.forward(g, n, z, false);
                let c = g.dropout(c, self.config.dropout);
                h = g.add(h, c);
            }
            let n = b.ln3.forward(g, h);
            let f = b.ff.forward(g, n);
            let f = g.dropout(f, self.config.dropout);
            h = g.add(h, f);
        }
        let h = self.final_ln.forward(g, h);
        Ok(self.out.forward(g, h))
    }

    /// Next-token logits after `prev_tokens` (`1 x V`).
    pub fn step(&self, g: &mut Graph, prev_tokens: &[u32], z: Var) -> Result<Var> {
        let logits = self.forward(g, prev_tokens, z)?;
        Ok(g.slice_rows(logits, prev_tokens.len() - 1, 1))
    }
}

/// Learned token embeddings feeding an `Encoder` without input projection.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut Rng) -> Self {
        Embedding { table: store.add_normal(format!("{name}.embed"), vocab, d, 1.0, rng) }
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    pub fn forward(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let v = g.params().get(self.table).rows();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::validation("token", format!("id {bad} outside vocabulary of {v}")));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(self.table);
        Ok(g.gather(table, &idx))
    }
}
