//! Sequence-length expansion layers inside a complete encoder-decoder
//! captioning pipeline.
//!
//! The core idea: instead of self-attention, each layer transforms its
//! length-L input into one or more sequences of arbitrary target lengths
//! (forward expansion), processes them, and projects back to length L
//! (backward expansion). Three layer families are provided — static
//! expansion, block static expansion over a group of lengths, and dynamic
//! expansion which preserves auto-regression for decoding.
//!
//! Everything runs on a small f64 reverse-mode autodiff core, so the whole
//! model trains on CPU at desk scale: cross-entropy pre-training followed
//! by self-critical fine-tuning with a CIDEr-D reward, a four-stage
//! frozen/end-to-end schedule, a feature cache, RAdam, and beam search
//! decoding.
//!
//! Start with the runnable programs under `examples/`; the `xpn` binary
//! exposes the same pipeline as subcommands.

pub mod blocks;
pub mod data;
pub mod error;
pub mod expansion;
pub mod model;
pub mod params;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use expansion::{BackwardNormScope, DynamicExpansion, StaticExpansion};
pub use model::{Model, ModelConfig, VisualFeatures};
pub use params::{grad_check, GradCheckReport, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, Var};
