//! Sparse feed-forward layers viewed as blocked key/value memories.
//!
//! The crate holds the numerics ([`tensor`], [`rng`]), the memory layer
//! ([`memory`]), every block-selection method ([`selectors`]), a small causal
//! language model with hand-written gradients ([`training`]) and the FLOPs and
//! routing analytics ([`analysis`]).

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod memory;
pub mod rng;
pub mod selectors;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
