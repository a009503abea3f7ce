//! Minimal differentiable numeric core.
//!
//! Every network in the crate is a fixed graph of the layers below. Each
//! layer has a `forward` that returns its output plus a cache, and a
//! `backward` that consumes the cache, accumulates parameter gradients into a
//! [`Grads`] buffer and returns the gradient with respect to its inputs.
//! Forward passes only read a [`ParamStore`], so a shared snapshot can be
//! evaluated from many workers at once.

pub mod attention;
pub mod checkpoint;
pub mod dist;
pub mod encoder;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod params;
pub mod tensor;

pub use attention::MultiHeadAttention;
pub use encoder::{Encoder, PositionalEmbedding};
pub use gru::GruCell;
pub use layers::{dense_forward, LayerNorm, Linear};
pub use params::{AdamConfig, Grads, ParamId, ParamStore};
pub use tensor::Tensor2;
