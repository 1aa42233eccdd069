//! Simulation of noise-limited analog matrix multiplication for neural-network
//! inference, together with an optimizer that learns per-layer or per-channel
//! energy-per-MAC allocations under an accuracy constraint.
//!
//! The numeric core is generic over the scalar type via [`num::Element`];
//! concrete `f64` aliases are exported at the crate root and used by the CLI.

pub mod bits;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod noise;
pub mod num;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Default `f64` instantiations used by the CLI and the experiment drivers.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type Gradients64 = tensor::Gradients<f64>;
pub type Model64 = model::ModelGraph<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type EnergyAlloc64 = optim::EnergyAlloc<f64>;

pub use noise::NoiseSpec;

/// Photon energy at 1.55 um, in joules (128 zJ).
pub const PHOTON_ENERGY_1550NM_J: f64 = 1.28e-19;
