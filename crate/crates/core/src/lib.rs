//! Contrastive multi-modal pretraining with sentence-embedding objectives.
//!
//! The crate trains a pair of small encoders (captions and one other
//! modality) with the CLIP/CyCLIP family of losses, optionally augmented
//! with dropout-twin or NLI sentence objectives, and evaluates the result
//! with retrieval metrics, prompt-ensemble zero-shot classification and
//! hypersphere geometry diagnostics.

pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
