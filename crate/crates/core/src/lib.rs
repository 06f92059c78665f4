//! Gradient re-parameterization lab.
//!
//! A small deterministic deep-learning stack (dense tensors, reverse-mode
//! autodiff, VGG-style model builders) plus the pieces needed to train plain
//! models with model-specific gradient multipliers: multiplier construction,
//! equivalent-kernel initialization, hyper-search of the multiplier scales,
//! executable CSLA/GR equivalence checks, structural conversion and INT8
//! post-training quantization analysis.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod hypersearch;
pub mod init;
pub mod lab;
pub mod models;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, NodeId, ParamId};
pub use rng::Rng;
pub use tensor::{Tensor, Tensor4};
