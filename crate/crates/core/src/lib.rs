pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{PieError, Result};
pub use tensor::Tensor;
