//! Desk-scale transformer library with residual bottleneck adapters.
//!
//! The crate provides everything needed to train and probe a micro BERT-style
//! encoder in two phases — masked-language pretraining on the task's own text,
//! then supervised fine-tuning — either updating every parameter or only small
//! adapter layers inserted inside each block while the backbone stays frozen.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff on a per-forward tape.
//! - [`model`]: the encoder, adapter layers, parameter groups, and checkpoints.
//! - [`data`]: word-level vocab, encoding, TSV ingestion, and synthetic tasks.
//! - [`train`]: masking, losses, Adam, the phase runner, and evaluation.
//! - [`metrics`]: task metrics plus per-group gradient-norm telemetry.
//! - [`attack`]: greedy probability-weighted word-substitution attack.

pub mod attack;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
