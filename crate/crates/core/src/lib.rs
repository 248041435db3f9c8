//! Adversarial style augmentation for semantic segmentation, built on a
//! small reverse-mode autodiff engine.

pub mod analysis;
pub mod augment;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod preaug;
pub mod rng;
pub mod style;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
