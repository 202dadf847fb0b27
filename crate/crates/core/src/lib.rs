//! Two-stage preference alignment of a miniature language model for outfit
//! compatibility prediction (CP) and fill-in-the-blank (FITB) completion:
//! supervised fine-tuning through LoRA adapters, then Direct Preference
//! Optimization against the frozen SFT model.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod promptgen;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
