pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dist;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod quant;
pub mod reparam;
pub mod rng;
pub mod trainer;
pub mod transform;

pub use error::{Error, Result};
