//! Block-float-point training with per-block dynamic bit-widths.
//!
//! Tensors are split into 4×4 blocks that share one exponent. During
//! training the engine measures how much quantization noise in each block
//! perturbs the loss, and once per epoch it reassigns mantissa bit-widths
//! so that the average stays at a target while sensitive blocks get more
//! bits.

pub mod bfp;
pub mod bwmap;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod nnkernel;
pub mod oracle;
pub mod sens;

pub use error::{Error, Result};
