//! Cross-modal aerial/LiDAR localization.

pub mod cli;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
