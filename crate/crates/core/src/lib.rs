//! Flare-aware multi-spectral vehicle re-identification.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod fce;
mod gemm;
pub mod graph;
pub mod losses;
pub mod mfmp;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pseudo_label;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod visualize;

pub use error::{Error, Result};
pub use tensor::Tensor;
