//! Dual-encoder water segmentation with spatially masked gated fusion of SAR
//! and partially missing multispectral imagery.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
mod error;
pub mod eval;
pub mod fsx;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod significance;
pub mod train;

pub use error::{Error, Result};
