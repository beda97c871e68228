//! Source-free multi-source domain adaptation for re-identification with
//! gated low-rank adapter experts.
//!
//! Pipeline: each labeled source domain gets its own backbone; each backbone
//! is adapted to the unlabeled target by training only low-rank adapters on
//! clustering pseudo-labels; the source backbones are then averaged and a
//! small per-layer gate learns how to mix the adapter residuals.

pub mod data;
pub mod error;
pub mod eval;
pub mod gating;
pub mod lora;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod pseudo;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Triplet, Var};
pub use tensor::Tensor;
