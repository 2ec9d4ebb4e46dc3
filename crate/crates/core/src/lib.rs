//! One-pass multiple-relation extraction.
//!
//! A small transformer encoder, trained from scratch in `f64` with hand-written
//! backward passes, whose self-attention adds learned relative-distance
//! vectors on every token pair that touches an entity mention. All pairs in a
//! paragraph are then classified from a single encoding.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod variants;

pub use config::{HeadType, ModelConfig, PassMode, Variant};
pub use error::{Error, Result};
pub use model::{Model, TokenVocab};
pub use tensor::DenseMatrix;
