//! Doc-to-LoRA: compile a context into an adapter with one forward pass.
//!
//! This crate implements a desk-scale version of context internalization:
//! a frozen tiny language model, a hypernetwork that reads a context once and
//! emits a LoRA adapter (or a prefix of key/value entries) for that model,
//! gradient-based context-distillation baselines, and a synthetic retrieval
//! benchmark with an instrumentation harness.
//!
//! Entry points:
//! - [`target_lm`]: the frozen target transformer (init, forward, generate,
//!   pretraining, checkpoints).
//! - [`adapters`]: LoRA algebra (apply, chunk composition) and prefix-KV.
//! - [`hypernet`]: the perceiver-style generator mapping activations to
//!   adapters.
//! - [`distill`]: distillation losses, gradient-descent baselines, and the
//!   hypernetwork meta-training loop.
//! - [`tasks`]: the needle-retrieval benchmark, query generation, and prompt
//!   construction.
//! - [`harness`]: experiment configs, run directories, metrics, and the
//!   command implementations behind the CLI.

pub mod adapters;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod harness;
pub mod hypernet;
pub mod prompts;
pub mod target_lm;
pub mod tasks;
pub mod tensor_util;
pub mod vocab;

pub use error::{D2lError, Result};
