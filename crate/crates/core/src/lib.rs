//! Post-training pruning with sparsity induction.
//!
//! Weights are pruned by importance scores; before pruning, absorbable
//! per-channel scales and shifts (and query/key rescaling) are learned so
//! that the mask discards less of the signal. All learned transforms fold
//! back into the weights, so the dense model's function is unchanged.

pub mod error;
pub mod eval;
pub mod importance;
pub mod induction;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod reparam;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Vector};
