//! Multi-task ultrasound analysis on a shared ViT encoder with task-conditioned
//! mixture-of-experts blocks.
//!
//! The crate covers the encoder ([`backbone`]), task heads ([`heads`]), losses
//! ([`objectives`]), evaluation ([`metrics`]), datasets ([`data`], [`synth`]),
//! training under the single-task, grouped and unified paradigms ([`trainer`])
//! and baseline comparisons ([`analysis`]).

pub mod analysis;
pub mod backbone;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
