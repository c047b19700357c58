//! xmb — a desk-scale pipeline for optimizing a single universal adversarial
//! input (image pixels or text tokens) that jailbreaks a safety-trained toy
//! vision-language model, plus the purification defense and the evaluation
//! harness that measures the whole effect end to end.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`numerics`]: tape-based reverse-mode autodiff over dense f32 tensors.
//! - [`toyvlm`]: the attack target — tokenizer, vision projector, decoder
//!   transformer, sampler, and the guardrail training recipe.
//! - [`objective`]: the few-shot corpus negative log-likelihood the attacks
//!   minimize.
//! - [`visattack`]: projected gradient descent on image pixels.
//! - [`textattack`]: gradient-guided discrete token substitution.
//! - [`defense`]: forward-diffusion purification with pluggable denoisers.
//! - [`evalharness`]: toxicity ratios, jailbreak success rates, transfer
//!   matrices, and scorer clients.
//! - [`cli`]: run configuration, persistence, and the command entry points.

pub mod cli;
pub mod defense;
pub mod error;
pub mod evalharness;
pub mod images;
pub mod numerics;
pub mod objective;
pub mod textattack;
pub mod toyvlm;
pub mod visattack;

pub use error::{Error, Result};
