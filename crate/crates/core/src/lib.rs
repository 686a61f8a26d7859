//! Alternating denoising diffusion over pixels and VQ tokens at desk scale.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod checkpoint;
pub mod data;
pub mod error;
mod im2col;
pub mod logging;
mod macros;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod recognition;
pub mod sampler;
pub mod schedules;
pub mod tokenizer;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
