//! Desk-scale open-ended visual question answering.
//!
//! A 512-d image feature vector is mapped by a small MLP into a sequence of
//! prefix embeddings for a decoder-only transformer, which generates the
//! answer token by token. The language model stays frozen; adaptation happens
//! through one of four strategies (frozen mapper-only, prompt tuning, prefix
//! tuning, LoRA). Everything is built on an f64 tape autodiff core so that
//! gradients, parameter counts, and training behavior can be verified
//! exactly.

pub mod checkpoint;
pub mod error;
pub mod mapper;
pub mod model;
pub mod peft;
pub mod prompt;
pub mod tensor;

pub use error::{Error, Result};
