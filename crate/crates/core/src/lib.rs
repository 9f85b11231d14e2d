//! Unsupervised spoken-sentence embeddings learned from discovered acoustic
//! units: frame quantization, unit tokenization, a small autodiff transformer
//! stack, sequence-autoencoder and contrastive-distillation trainers, and the
//! evaluation metrics used to score them.

mod binio;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod index;
pub mod nn;
pub mod quantizer;
pub mod rng;
pub mod teachers;
pub mod tokenizer;
pub mod training;
pub mod wavembed;

pub use error::{Error, Result};
