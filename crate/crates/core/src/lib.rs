//! Speaker-aware hierarchical encoder-decoder for multi-turn dialogue.
//!
//! Queries are encoded one at a time and then related to each other by
//! turn-level relative attention; the decoder reuses the hidden states of
//! previous responses as a recurrent memory. The crate contains the model,
//! a small reverse-mode autodiff tape, Adam training, greedy decoding and
//! the evaluation metrics. It builds without `std` (with `alloc`).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod generation;
pub mod layers;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod training;

pub use corpus::{Conversation, RawConversation, Vocabulary};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{AblationFlags, Model, ModelConfig};
pub use scalar::Scalar;
