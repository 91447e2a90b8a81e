//! Core library: cross-modal encoder, relatedness transfer, and the
//! evaluation protocol around them.

pub mod attention;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod synth;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
