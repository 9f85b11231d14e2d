//! Dense f64 tensors, a tape-based autodiff graph, transformer layers and the
//! optimizer shared by every model in the crate.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
pub mod loss;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Mode, Var};
pub use layers::{
    OUTPUT_STD,
    attention_pool, sinusoidal_positions, AttentionPool, Conditioning, Decoder, Embedding, Encoder, EncoderConfig,
    FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
pub use params::{AdamW, Grads, ParamId, ParamStore};
pub use tensor::Tensor;

/// Converts f32 storage rows to a tensor.
pub fn tensor_from_f32(rows: usize, cols: usize, data: &[f32]) -> Tensor {
    Tensor::new(rows, cols, data.iter().map(|&v| v as f64).collect()).expect("caller passes rows * cols values")
}
