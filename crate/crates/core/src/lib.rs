//! Noise-robust, vision-guided prompt learning on frozen stand-in encoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense kernels with analytic backward passes and a
//!   finite-difference oracle.
//! - [`pipeline`]: the prompt modulation stack and classifier.
//! - [`objective`]: cross-entropy / generalized cross-entropy routing.
//! - [`ot`]: Sinkhorn transport and the reliable/unreliable split.
//! - [`data`]: synthetic features, label noise, few-shot sampling and the
//!   VPFT file format.
//! - [`trainer`]: cosine-annealed SGD, evaluation and experiment runs.
//! - [`theory`]: numerical checks of the attention-margin robustness bound.
//! - [`config`]: the flat run configuration shared by every entry point.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod objective;
pub mod ot;
pub mod pipeline;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
