pub mod annotate;
pub mod cli;
pub mod corpus;
pub mod demo;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod instructgen;
pub mod mining;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod train;

pub use error::{Error, Result};

/// Single-precision encoder used for training and evaluation.
pub type Model32 = model::FusionModel<f32>;
/// Double-precision encoder used for gradient checks.
pub type Model64 = model::FusionModel<f64>;
