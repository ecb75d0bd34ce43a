//! Progressive instruction tuning for a miniature multimodal transformer.
//!
//! The crate builds a small vision encoder + causal language decoder from
//! scratch on a reverse-mode autodiff [`tensor`] core, adds low-rank
//! adapters ([`lora`]) and an instruction-adaptive visual prompt module
//! ([`prompt`]), and trains it with staged freeze plans ([`staging`]) on a
//! procedurally generated image-quality task suite ([`synth`]).

pub mod error;
pub mod par;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub mod experiment;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub(crate) mod rng;
pub mod staging;
pub mod synth;
