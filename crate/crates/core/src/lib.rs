//! Backpack language models.
//!
//! A Backpack represents each position of a sequence as a non-negative,
//! context-dependent weighted sum of *non-contextual* sense vectors, and
//! predicts the next token log-linearly from that sum. Because every sense
//! vector's contribution to the logits is additive, edits made to a sense
//! apply identically (up to a non-negative scalar) in every context.
//!
//! Modules:
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! - [`model`]: the sense network, contextualization network and LM head.
//! - [`reductions`]: CBOW and single-layer attention written as Backpacks.
//! - [`training`]: vocabulary, batching, AdamW, training loop, checkpoints.
//! - [`evaluation`]: perplexity and lexical-similarity evaluation.
//! - [`control`]: sense projections, topic control, debiasing, editing.
//! - [`verify`]: self-checks shared by the CLI and the acceptance suite.

pub mod control;
pub mod error;
pub mod evaluation;
pub mod par;
pub mod reductions;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
