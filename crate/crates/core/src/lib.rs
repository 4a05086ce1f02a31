//! Knowledge-aligned language modeling at desk scale.
//!
//! A small causal transformer is trained on text-described knowledge-graph
//! triples with a dual-view contrastive objective plus a triple-completion
//! language-modeling objective, then evaluated by embedding-based link
//! prediction, generation-based question answering and representation
//! diagnostics (alignment, uniformity, anisotropy).

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod kg;
pub mod kgc;
pub mod kgqa;
pub mod losses;
pub mod model;
pub mod optim;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
