//! # tsnat
//!
//! A dual-mode (autoregressive / non-autoregressive) transformer for sequence
//! transduction, trained and decoded end-to-end on a synthetic pseudo-speech
//! task. One parameter-shared decoder runs either with a causal self-attention
//! mask (AR) or with none (NAR); training combines both losses, and decoding
//! runs in two steps: NAR N-best pre-selection from a per-position probability
//! graph, then parallel AR rescoring.
//!
//! Layout:
//! - [`tensor`] / [`tape`] — dense f64 tensors and tape-based reverse-mode autodiff
//! - [`vocab`], [`task`], [`corpus_io`], [`augment`], [`metrics`] — data and evaluation
//! - [`model`] — front end, acoustic encoder, dual-mode decoder
//! - [`training`] — joint loss, Noam schedule, Adam, checkpoint averaging
//! - [`inference`] — greedy / N-best / two-step / beam decoding and RTF accounting
//! - [`runconfig`] — the key=value run configuration consumed by the CLI

pub mod data;
pub mod inference;
pub mod model;
pub mod training;
pub mod gradcheck;
pub mod runconfig;
pub mod tape;
pub mod tensor;

pub use tape::{NodeId, Tape};
pub use tensor::{Tensor, TensorError};
